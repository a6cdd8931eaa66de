#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tamo/errors.hpp"
#include "tamo/tensor.hpp"

namespace tamo {

// Cyclic Jacobi eigendecomposition of a symmetric matrix, double precision.
// a is n*n row-major and gets destroyed. On return eigvals holds the
// eigenvalues and eigvecs the eigenvectors as rows (eigvecs[k*n+i] is
// component i of eigenvector k), so a = V^T diag(w) V.
inline void eigh_sym(std::vector<double> a, int64_t n, std::vector<double>& eigvals,
                     std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) eigvecs[static_cast<size_t>(i * n + i)] = 1.0;

    auto A = [&](int64_t r, int64_t c) -> double& { return a[static_cast<size_t>(r * n + c)]; };
    auto V = [&](int64_t r, int64_t c) -> double& {
        return eigvecs[static_cast<size_t>(r * n + c)];
    };

    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
        if (off < 1e-26 * static_cast<double>(n * n) || off == 0.0) break;

        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = A(p, q);
                if (apq == 0.0) continue;
                double app = A(p, p), aqq = A(q, q);
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0.0) ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                        : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double vpk = V(p, k), vqk = V(q, k);
                    V(p, k) = c * vpk - s * vqk;
                    V(q, k) = s * vpk + c * vqk;
                }
            }
        }
    }

    eigvals.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eigvals[static_cast<size_t>(i)] = A(i, i);
}

// Principal square root of a symmetric PSD matrix (double, row-major).
// Negative eigenvalues within `clamp_tol` of zero are clamped to zero;
// anything more negative is a precondition failure.
inline std::vector<double> sym_sqrtm_d(const std::vector<double>& m, int64_t n,
                                       double asym_tol = 1e-5, double clamp_tol = 1e-6) {
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = i + 1; j < n; ++j) {
            double diff = std::fabs(m[static_cast<size_t>(i * n + j)] -
                                    m[static_cast<size_t>(j * n + i)]);
            if (!(diff <= asym_tol)) {
                throw ContractError("sym_sqrtm: matrix asymmetric at (" + std::to_string(i) +
                                    "," + std::to_string(j) + "), |a-a^T| = " +
                                    std::to_string(diff));
            }
        }
    }
    // Symmetrize before decomposing so tiny asymmetries do not leak through.
    std::vector<double> sym(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            sym[static_cast<size_t>(i * n + j)] = 0.5 * (m[static_cast<size_t>(i * n + j)] +
                                                         m[static_cast<size_t>(j * n + i)]);

    std::vector<double> w, v;
    eigh_sym(std::move(sym), n, w, v);
    for (int64_t k = 0; k < n; ++k) {
        double& wk = w[static_cast<size_t>(k)];
        if (wk < -clamp_tol && wk < -1e-6 * std::fabs(w[0])) {
            // Tolerate slightly negative eigenvalues only.
            if (wk < -1e-3) {
                throw ContractError("sym_sqrtm: matrix not PSD, eigenvalue " +
                                    std::to_string(wk));
            }
        }
        wk = wk > 0.0 ? std::sqrt(wk) : 0.0;
    }
    // S = V^T diag(sqrt w) V with eigenvectors stored as rows of v.
    std::vector<double> out(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t k = 0; k < n; ++k) {
                acc += v[static_cast<size_t>(k * n + i)] * w[static_cast<size_t>(k)] *
                       v[static_cast<size_t>(k * n + j)];
            }
            out[static_cast<size_t>(i * n + j)] = acc;
        }
    }
    return out;
}

// Public f32 surface; computation runs in f64.
inline Tensor sym_sqrtm(const Tensor& m) {
    if (m.ndim() != 2 || m.shape[0] != m.shape[1]) {
        throw ContractError("sym_sqrtm: expected square matrix, got " + m.shape_str());
    }
    int64_t n = m.shape[0];
    std::vector<double> md(m.data.begin(), m.data.end());
    std::vector<double> s = sym_sqrtm_d(md, n);
    std::vector<float> out(s.size());
    for (size_t i = 0; i < s.size(); ++i) out[i] = static_cast<float>(s[i]);
    return Tensor({n, n}, std::move(out));
}

}  // namespace tamo
