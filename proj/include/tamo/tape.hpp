#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "tamo/errors.hpp"
#include "tamo/tensor.hpp"

namespace tamo {

// Define-by-run reverse-mode tape over BasicTensor<S>. Node values are stored
// in S (float in production); gradient accumulators are always double. A tape
// is single-threaded and rebuilt per training step.
template <class S>
class BasicTape {
public:
    using Id = int32_t;

    struct Node {
        BasicTensor<S> value;
        std::vector<double> grad;
        bool needs_grad = false;
        std::function<void(BasicTape&)> back;
    };

    Id leaf(BasicTensor<S> v) { return push(std::move(v), true, nullptr); }
    Id constant(BasicTensor<S> v) { return push(std::move(v), false, nullptr); }

    Id push(BasicTensor<S> v, bool needs_grad, std::function<void(BasicTape&)> back) {
        nodes_.push_back(Node{std::move(v), {}, needs_grad, std::move(back)});
        Node& n = nodes_.back();
        n.grad.assign(n.value.data.size(), 0.0);
        return static_cast<Id>(nodes_.size() - 1);
    }

    const BasicTensor<S>& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
    std::vector<double>& grad(Id id) { return nodes_[static_cast<size_t>(id)].grad; }
    bool needs_grad(Id id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    size_t size() const { return nodes_.size(); }

    S scalar(Id id) const {
        const auto& v = val(id);
        if (v.numel() != 1) throw ContractError("scalar(): node is not scalar");
        return v.data[0];
    }

    // Populates gradients for every node reachable from `root`.
    void backward(Id root) {
        Node& r = nodes_[static_cast<size_t>(root)];
        if (r.value.numel() != 1) {
            throw ContractError("backward: root must be scalar, got shape " +
                                r.value.shape_str());
        }
        for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
        r.grad[0] = 1.0;
        for (int64_t i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.needs_grad && n.back) n.back(*this);
        }
    }

private:
    std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;

namespace tape_ops {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using MapConst = Eigen::Map<const RowMat<S>>;

template <class S>
MapConst<S> as_mat(const BasicTensor<S>& t) {
    return MapConst<S>(t.data.data(), t.rows(), t.cols());
}

inline Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
grad_mat(std::vector<double>& g, int64_t r, int64_t c) {
    return {g.data(), r, c};
}

template <class S>
typename BasicTape<S>::Id add(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.shape != vb.shape) {
        throw ContractError("add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    }
    BasicTensor<S> out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return id;
}

// x: [N x D], b: [D] (or [1 x D]) broadcast over rows.
template <class S>
typename BasicTape<S>::Id add_bias(BasicTape<S>& t, int32_t x, int32_t b) {
    const auto& vx = t.val(x);
    const auto& vb = t.val(b);
    int64_t n = vx.rows(), d = vx.cols();
    if (vb.numel() != d) {
        throw ContractError("add_bias: bias " + vb.shape_str() + " vs cols " + std::to_string(d));
    }
    BasicTensor<S> out = vx;
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.data[static_cast<size_t>(r * d + c)] += vb.data[static_cast<size_t>(c)];
    bool ng = t.needs_grad(x) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        if (tp.needs_grad(x)) {
            auto& gx = tp.grad(x);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < d; ++c) gb[static_cast<size_t>(c)] += g[static_cast<size_t>(r * d + c)];
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id sub(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.shape != vb.shape) {
        throw ContractError("sub: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    }
    BasicTensor<S> out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id mul(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.shape != vb.shape) {
        throw ContractError("mul: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    }
    BasicTensor<S> out = va;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        const auto& xa = tp.val(a);
        const auto& xb = tp.val(b);
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * static_cast<double>(xb.data[i]);
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * static_cast<double>(xa.data[i]);
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id scale(BasicTape<S>& t, int32_t a, double c) {
    BasicTensor<S> out = t.val(a);
    for (auto& x : out.data) x = static_cast<S>(static_cast<double>(x) * c);
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
    return id;
}

// Standard matrix product; forward in S via Eigen, backward in f64.
template <class S>
typename BasicTape<S>::Id matmul(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.shape[1] != vb.shape[0]) {
        throw ContractError("matmul: dimension mismatch " + va.shape_str() + " x " +
                            vb.shape_str());
    }
    int64_t n = va.shape[0], k = va.shape[1], m = vb.shape[1];
    BasicTensor<S> out = BasicTensor<S>::zeros({n, m});
    MapMat<S>(out.data.data(), n, m).noalias() = as_mat(va) * as_mat(vb);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto gc = grad_mat(tp.grad(id), n, m);
        auto A = as_mat(tp.val(a)).template cast<double>().eval();
        auto B = as_mat(tp.val(b)).template cast<double>().eval();
        if (tp.needs_grad(a)) grad_mat(tp.grad(a), n, k).noalias() += gc * B.transpose();
        if (tp.needs_grad(b)) grad_mat(tp.grad(b), k, m).noalias() += A.transpose() * gc;
    });
    return id;
}

// a * b^T, for attention scores and tied projections.
template <class S>
typename BasicTape<S>::Id matmul_nt(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.shape[1] != vb.shape[1]) {
        throw ContractError("matmul_nt: dimension mismatch " + va.shape_str() + " x " +
                            vb.shape_str() + "^T");
    }
    int64_t n = va.shape[0], k = va.shape[1], m = vb.shape[0];
    BasicTensor<S> out = BasicTensor<S>::zeros({n, m});
    MapMat<S>(out.data.data(), n, m).noalias() = as_mat(va) * as_mat(vb).transpose();
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto gc = grad_mat(tp.grad(id), n, m);
        auto A = as_mat(tp.val(a)).template cast<double>().eval();
        auto B = as_mat(tp.val(b)).template cast<double>().eval();
        if (tp.needs_grad(a)) grad_mat(tp.grad(a), n, k).noalias() += gc * B;
        if (tp.needs_grad(b)) grad_mat(tp.grad(b), m, k).noalias() += gc.transpose() * A;
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id relu(BasicTape<S>& t, int32_t a) {
    BasicTensor<S> out = t.val(a);
    for (auto& x : out.data) x = x > S(0) ? x : S(0);
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        const auto& x = tp.val(a);
        for (size_t i = 0; i < g.size(); ++i)
            if (x.data[i] > S(0)) ga[i] += g[i];
    });
    return id;
}

// tanh-approximation GELU; smooth, which keeps the finite-difference oracles clean.
template <class S>
typename BasicTape<S>::Id gelu(BasicTape<S>& t, int32_t a) {
    constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kBeta = 0.044715;
    BasicTensor<S> out = t.val(a);
    for (auto& v : out.data) {
        double x = static_cast<double>(v);
        v = static_cast<S>(0.5 * x * (1.0 + std::tanh(kAlpha * (x + kBeta * x * x * x))));
    }
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        const auto& xs = tp.val(a);
        for (size_t i = 0; i < g.size(); ++i) {
            double x = static_cast<double>(xs.data[i]);
            double u = kAlpha * (x + kBeta * x * x * x);
            double th = std::tanh(u);
            double du = kAlpha * (1.0 + 3.0 * kBeta * x * x);
            double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
            ga[i] += g[i] * d;
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id softmax_rows(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    int64_t n = va.rows(), d = va.cols();
    BasicTensor<S> out = va;
    for (int64_t r = 0; r < n; ++r) {
        double mx = -1e300;
        for (int64_t c = 0; c < d; ++c) mx = std::max(mx, static_cast<double>(va.at(r, c)));
        double sum = 0.0;
        std::vector<double> e(static_cast<size_t>(d));
        for (int64_t c = 0; c < d; ++c) {
            e[static_cast<size_t>(c)] = std::exp(static_cast<double>(va.at(r, c)) - mx);
            sum += e[static_cast<size_t>(c)];
        }
        for (int64_t c = 0; c < d; ++c) out.at(r, c) = static_cast<S>(e[static_cast<size_t>(c)] / sum);
    }
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        const auto& p = tp.val(id);
        for (int64_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < d; ++c)
                dot += static_cast<double>(p.at(r, c)) * g[static_cast<size_t>(r * d + c)];
            for (int64_t c = 0; c < d; ++c) {
                double pc = static_cast<double>(p.at(r, c));
                ga[static_cast<size_t>(r * d + c)] += pc * (g[static_cast<size_t>(r * d + c)] - dot);
            }
        }
    });
    return id;
}

// Softmax over a square score matrix where row i attends to columns 0..i only.
template <class S>
typename BasicTape<S>::Id causal_softmax_rows(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    if (va.ndim() != 2 || va.shape[0] != va.shape[1]) {
        throw ContractError("causal_softmax_rows: expected square matrix, got " + va.shape_str());
    }
    int64_t n = va.rows();
    BasicTensor<S> out = BasicTensor<S>::zeros({n, n});
    for (int64_t r = 0; r < n; ++r) {
        double mx = -1e300;
        for (int64_t c = 0; c <= r; ++c) mx = std::max(mx, static_cast<double>(va.at(r, c)));
        double sum = 0.0;
        std::vector<double> e(static_cast<size_t>(r + 1));
        for (int64_t c = 0; c <= r; ++c) {
            e[static_cast<size_t>(c)] = std::exp(static_cast<double>(va.at(r, c)) - mx);
            sum += e[static_cast<size_t>(c)];
        }
        for (int64_t c = 0; c <= r; ++c) out.at(r, c) = static_cast<S>(e[static_cast<size_t>(c)] / sum);
    }
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        const auto& p = tp.val(id);
        for (int64_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c <= r; ++c)
                dot += static_cast<double>(p.at(r, c)) * g[static_cast<size_t>(r * n + c)];
            for (int64_t c = 0; c <= r; ++c) {
                double pc = static_cast<double>(p.at(r, c));
                ga[static_cast<size_t>(r * n + c)] += pc * (g[static_cast<size_t>(r * n + c)] - dot);
            }
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id layernorm_rows(BasicTape<S>& t, int32_t x, int32_t gain, int32_t bias,
                                         double eps = 1e-5) {
    const auto& vx = t.val(x);
    int64_t n = vx.rows(), d = vx.cols();
    if (t.val(gain).numel() != d || t.val(bias).numel() != d) {
        throw ContractError("layernorm_rows: gain/bias size mismatch");
    }
    BasicTensor<S> out = BasicTensor<S>::zeros({n, d});
    const auto& vg = t.val(gain);
    const auto& vb = t.val(bias);
    for (int64_t r = 0; r < n; ++r) {
        double mu = 0.0;
        for (int64_t c = 0; c < d; ++c) mu += static_cast<double>(vx.at(r, c));
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            double dv = static_cast<double>(vx.at(r, c)) - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < d; ++c) {
            double xh = (static_cast<double>(vx.at(r, c)) - mu) * inv;
            out.at(r, c) = static_cast<S>(xh * static_cast<double>(vg.data[static_cast<size_t>(c)]) +
                                          static_cast<double>(vb.data[static_cast<size_t>(c)]));
        }
    }
    bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(bias);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        const auto& xv = tp.val(x);
        const auto& gv = tp.val(gain);
        for (int64_t r = 0; r < n; ++r) {
            double mu = 0.0;
            for (int64_t c = 0; c < d; ++c) mu += static_cast<double>(xv.at(r, c));
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t c = 0; c < d; ++c) {
                double dv = static_cast<double>(xv.at(r, c)) - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(d);
            double inv = 1.0 / std::sqrt(var + eps);

            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            std::vector<double> xh(static_cast<size_t>(d)), dxh(static_cast<size_t>(d));
            for (int64_t c = 0; c < d; ++c) {
                xh[static_cast<size_t>(c)] = (static_cast<double>(xv.at(r, c)) - mu) * inv;
                double gy = g[static_cast<size_t>(r * d + c)];
                dxh[static_cast<size_t>(c)] = gy * static_cast<double>(gv.data[static_cast<size_t>(c)]);
                mean_dxh += dxh[static_cast<size_t>(c)];
                mean_dxh_xh += dxh[static_cast<size_t>(c)] * xh[static_cast<size_t>(c)];
            }
            mean_dxh /= static_cast<double>(d);
            mean_dxh_xh /= static_cast<double>(d);
            if (tp.needs_grad(x)) {
                auto& gx = tp.grad(x);
                for (int64_t c = 0; c < d; ++c) {
                    gx[static_cast<size_t>(r * d + c)] +=
                        inv * (dxh[static_cast<size_t>(c)] - mean_dxh -
                               xh[static_cast<size_t>(c)] * mean_dxh_xh);
                }
            }
            if (tp.needs_grad(gain)) {
                auto& gg = tp.grad(gain);
                for (int64_t c = 0; c < d; ++c)
                    gg[static_cast<size_t>(c)] +=
                        g[static_cast<size_t>(r * d + c)] * xh[static_cast<size_t>(c)];
            }
            if (tp.needs_grad(bias)) {
                auto& gb = tp.grad(bias);
                for (int64_t c = 0; c < d; ++c)
                    gb[static_cast<size_t>(c)] += g[static_cast<size_t>(r * d + c)];
            }
        }
    });
    return id;
}

// Gather rows of `table` ([V x D]) at `ids`; backward scatter-adds.
template <class S>
typename BasicTape<S>::Id embedding(BasicTape<S>& t, int32_t table, std::vector<int64_t> ids) {
    const auto& vt = t.val(table);
    int64_t v = vt.rows(), d = vt.cols();
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw ContractError("embedding: id " + std::to_string(ids[i]) + " at position " +
                                std::to_string(i) + " out of range [0," + std::to_string(v) + ")");
        }
    }
    int64_t n = static_cast<int64_t>(ids.size());
    BasicTensor<S> out = BasicTensor<S>::zeros({n, d});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) out.at(r, c) = vt.at(ids[static_cast<size_t>(r)], c);
    bool ng = t.needs_grad(table);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=, ids = std::move(ids)](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& gt = tp.grad(table);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c)
                gt[static_cast<size_t>(ids[static_cast<size_t>(r)] * d + c)] +=
                    g[static_cast<size_t>(r * d + c)];
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id concat_rows(BasicTape<S>& t, int32_t a, int32_t b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.cols() != vb.cols()) {
        throw ContractError("concat_rows: column mismatch " + va.shape_str() + " vs " +
                            vb.shape_str());
    }
    int64_t na = va.rows(), nb = vb.rows(), d = va.cols();
    BasicTensor<S> out = BasicTensor<S>::zeros({na + nb, d});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + static_cast<int64_t>(va.data.size()));
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            size_t off = static_cast<size_t>(na * d);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id slice_rows(BasicTape<S>& t, int32_t a, int64_t r0, int64_t r1) {
    const auto& va = t.val(a);
    if (r0 < 0 || r1 > va.rows() || r0 >= r1) {
        throw ContractError("slice_rows: bad range [" + std::to_string(r0) + "," +
                            std::to_string(r1) + ") of " + va.shape_str());
    }
    int64_t d = va.cols();
    BasicTensor<S> out = BasicTensor<S>::zeros({r1 - r0, d});
    std::copy(va.data.begin() + r0 * d, va.data.begin() + r1 * d, out.data.begin());
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        size_t off = static_cast<size_t>(r0 * d);
        for (size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id slice_cols(BasicTape<S>& t, int32_t a, int64_t c0, int64_t c1) {
    const auto& va = t.val(a);
    if (c0 < 0 || c1 > va.cols() || c0 >= c1) {
        throw ContractError("slice_cols: bad range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") of " + va.shape_str());
    }
    int64_t n = va.rows(), d = va.cols(), w = c1 - c0;
    BasicTensor<S> out = BasicTensor<S>::zeros({n, w});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < w; ++c) out.at(r, c) = va.at(r, c0 + c);
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < w; ++c)
                ga[static_cast<size_t>(r * d + c0 + c)] += g[static_cast<size_t>(r * w + c)];
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id concat_cols(BasicTape<S>& t, const std::vector<int32_t>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty part list");
    int64_t n = t.val(parts[0]).rows();
    int64_t total = 0;
    for (int32_t p : parts) {
        if (t.val(p).rows() != n) throw ContractError("concat_cols: row mismatch");
        total += t.val(p).cols();
    }
    BasicTensor<S> out = BasicTensor<S>::zeros({n, total});
    int64_t off = 0;
    for (int32_t p : parts) {
        const auto& vp = t.val(p);
        int64_t w = vp.cols();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < w; ++c) out.at(r, off + c) = vp.at(r, c);
        off += w;
    }
    bool ng = false;
    for (int32_t p : parts) ng = ng || t.needs_grad(p);
    const int32_t id = static_cast<int32_t>(t.size());
    std::vector<int32_t> ps = parts;
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=, ps = std::move(ps)](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        int64_t o = 0;
        for (int32_t p : ps) {
            int64_t w = tp.val(p).cols();
            if (tp.needs_grad(p)) {
                auto& gp = tp.grad(p);
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < w; ++c)
                        gp[static_cast<size_t>(r * w + c)] += g[static_cast<size_t>(r * total + o + c)];
            }
            o += w;
        }
    });
    return id;
}

// Temporal nearest-neighbor upsampling by 2: rows are time steps.
template <class S>
typename BasicTape<S>::Id upsample_rows2(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    int64_t n = va.rows(), d = va.cols();
    BasicTensor<S> out = BasicTensor<S>::zeros({2 * n, d});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) {
            out.at(2 * r, c) = va.at(r, c);
            out.at(2 * r + 1, c) = va.at(r, c);
        }
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c)
                ga[static_cast<size_t>(r * d + c)] += g[static_cast<size_t>(2 * r * d + c)] +
                                                      g[static_cast<size_t>((2 * r + 1) * d + c)];
    });
    return id;
}

namespace detail {
// x: [T x Cin] -> columns [Tout x k*Cin] with zero padding.
template <class S>
BasicTensor<S> im2col(const BasicTensor<S>& x, int64_t kernel, int64_t stride, int64_t pad,
                      int64_t t_out) {
    int64_t tin = x.rows(), cin = x.cols();
    BasicTensor<S> cols = BasicTensor<S>::zeros({t_out, kernel * cin});
    for (int64_t to = 0; to < t_out; ++to) {
        for (int64_t dk = 0; dk < kernel; ++dk) {
            int64_t ti = to * stride + dk - pad;
            if (ti < 0 || ti >= tin) continue;
            for (int64_t c = 0; c < cin; ++c) cols.at(to, dk * cin + c) = x.at(ti, c);
        }
    }
    return cols;
}
}  // namespace detail

// 1-D temporal convolution. x: [T x Cin], w: [k*Cin x Cout] (kernel-major rows).
// With kernel 3, pad 1, the output length is ceil(T/stride).
template <class S>
typename BasicTape<S>::Id conv1d(BasicTape<S>& t, int32_t x, int32_t w, int64_t kernel,
                                 int64_t stride, int64_t pad) {
    const auto& vx = t.val(x);
    const auto& vw = t.val(w);
    int64_t tin = vx.rows(), cin = vx.cols();
    if (vw.rows() != kernel * cin) {
        throw ContractError("conv1d: weight rows " + std::to_string(vw.rows()) +
                            " != kernel*cin " + std::to_string(kernel * cin));
    }
    int64_t cout = vw.cols();
    int64_t t_out = (tin + 2 * pad - kernel) / stride + 1;
    if (t_out < 1) throw ContractError("conv1d: input too short, T=" + std::to_string(tin));
    BasicTensor<S> cols = detail::im2col(vx, kernel, stride, pad, t_out);
    BasicTensor<S> out = BasicTensor<S>::zeros({t_out, cout});
    MapMat<S>(out.data.data(), t_out, cout).noalias() = as_mat(cols) * as_mat(vw);
    bool ng = t.needs_grad(x) || t.needs_grad(w);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto gy = grad_mat(tp.grad(id), t_out, cout);
        BasicTensor<S> cols2 = detail::im2col(tp.val(x), kernel, stride, pad, t_out);
        auto colsD = as_mat(cols2).template cast<double>().eval();
        if (tp.needs_grad(w)) {
            grad_mat(tp.grad(w), kernel * cin, cout).noalias() += colsD.transpose() * gy;
        }
        if (tp.needs_grad(x)) {
            auto W = as_mat(tp.val(w)).template cast<double>().eval();
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gcols =
                gy * W.transpose();
            auto& gx = tp.grad(x);
            for (int64_t to = 0; to < t_out; ++to) {
                for (int64_t dk = 0; dk < kernel; ++dk) {
                    int64_t ti = to * stride + dk - pad;
                    if (ti < 0 || ti >= tin) continue;
                    for (int64_t c = 0; c < cin; ++c)
                        gx[static_cast<size_t>(ti * cin + c)] += gcols(to, dk * cin + c);
                }
            }
        }
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id sum_all(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    double acc = 0.0;
    for (S v : va.data) acc += static_cast<double>(v);
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(BasicTensor<S>({1, 1}, {static_cast<S>(acc)}), ng,
                !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
                    double g = tp.grad(id)[0];
                    auto& ga = tp.grad(a);
                    for (auto& v : ga) v += g;
                });
    return id;
}

template <class S>
typename BasicTape<S>::Id mean_all(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    double acc = 0.0;
    for (S v : va.data) acc += static_cast<double>(v);
    double n = static_cast<double>(va.numel());
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(BasicTensor<S>({1, 1}, {static_cast<S>(acc / n)}), ng,
                !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
                    double g = tp.grad(id)[0] / n;
                    auto& ga = tp.grad(a);
                    for (auto& v : ga) v += g;
                });
    return id;
}

template <class S>
typename BasicTape<S>::Id sum_rows(BasicTape<S>& t, int32_t a) {
    const auto& va = t.val(a);
    int64_t n = va.rows(), d = va.cols();
    BasicTensor<S> out = BasicTensor<S>::zeros({1, d});
    for (int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int64_t r = 0; r < n; ++r) acc += static_cast<double>(va.at(r, c));
        out.at(0, c) = static_cast<S>(acc);
    }
    bool ng = t.needs_grad(a);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(std::move(out), ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& ga = tp.grad(a);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) ga[static_cast<size_t>(r * d + c)] += g[static_cast<size_t>(c)];
    });
    return id;
}

template <class S>
typename BasicTape<S>::Id mse_loss(BasicTape<S>& t, int32_t pred, const BasicTensor<S>& target) {
    const auto& vp = t.val(pred);
    if (vp.shape != target.shape) {
        throw ContractError("mse_loss: shape mismatch " + vp.shape_str() + " vs " +
                            target.shape_str());
    }
    double acc = 0.0;
    for (size_t i = 0; i < vp.data.size(); ++i) {
        double dv = static_cast<double>(vp.data[i]) - static_cast<double>(target.data[i]);
        acc += dv * dv;
    }
    double n = static_cast<double>(vp.numel());
    bool ng = t.needs_grad(pred);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(BasicTensor<S>({1, 1}, {static_cast<S>(acc / n)}), ng,
                !ng ? std::function<void(BasicTape<S>&)>() : [=, tgt = target](BasicTape<S>& tp) {
                    double g = tp.grad(id)[0];
                    auto& gp = tp.grad(pred);
                    const auto& v = tp.val(pred);
                    for (size_t i = 0; i < gp.size(); ++i) {
                        double dv = static_cast<double>(v.data[i]) - static_cast<double>(tgt.data[i]);
                        gp[i] += g * 2.0 * dv / n;
                    }
                });
    return id;
}

// Huber / smooth-L1 with transition point beta, mean reduction.
template <class S>
typename BasicTape<S>::Id smooth_l1_loss(BasicTape<S>& t, int32_t pred,
                                         const BasicTensor<S>& target, double beta = 1.0) {
    const auto& vp = t.val(pred);
    if (vp.shape != target.shape) {
        throw ContractError("smooth_l1_loss: shape mismatch " + vp.shape_str() + " vs " +
                            target.shape_str());
    }
    double acc = 0.0;
    for (size_t i = 0; i < vp.data.size(); ++i) {
        double dv = static_cast<double>(vp.data[i]) - static_cast<double>(target.data[i]);
        double ad = std::fabs(dv);
        acc += ad < beta ? 0.5 * dv * dv / beta : ad - 0.5 * beta;
    }
    double n = static_cast<double>(vp.numel());
    bool ng = t.needs_grad(pred);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(BasicTensor<S>({1, 1}, {static_cast<S>(acc / n)}), ng,
                !ng ? std::function<void(BasicTape<S>&)>() : [=, tgt = target](BasicTape<S>& tp) {
                    double g = tp.grad(id)[0];
                    auto& gp = tp.grad(pred);
                    const auto& v = tp.val(pred);
                    for (size_t i = 0; i < gp.size(); ++i) {
                        double dv = static_cast<double>(v.data[i]) - static_cast<double>(tgt.data[i]);
                        double d = std::fabs(dv) < beta ? dv / beta : (dv > 0 ? 1.0 : -1.0);
                        gp[i] += g * d / n;
                    }
                });
    return id;
}

// Mean token cross-entropy from logits over the rows with mask != 0.
template <class S>
typename BasicTape<S>::Id cross_entropy_rows(BasicTape<S>& t, int32_t logits,
                                             std::vector<int64_t> targets,
                                             std::vector<uint8_t> mask) {
    const auto& vl = t.val(logits);
    int64_t n = vl.rows(), d = vl.cols();
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n) {
        throw ContractError("cross_entropy_rows: targets/mask length mismatch");
    }
    int64_t count = 0;
    double acc = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        int64_t tgt = targets[static_cast<size_t>(r)];
        if (tgt < 0 || tgt >= d) throw ContractError("cross_entropy_rows: target out of range");
        double mx = -1e300;
        for (int64_t c = 0; c < d; ++c) mx = std::max(mx, static_cast<double>(vl.at(r, c)));
        double sum = 0.0;
        for (int64_t c = 0; c < d; ++c) sum += std::exp(static_cast<double>(vl.at(r, c)) - mx);
        acc += (std::log(sum) + mx) - static_cast<double>(vl.at(r, tgt));
        ++count;
    }
    if (count == 0) throw ContractError("cross_entropy_rows: empty mask");
    bool ng = t.needs_grad(logits);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(BasicTensor<S>({1, 1}, {static_cast<S>(acc / static_cast<double>(count))}), ng,
                !ng ? std::function<void(BasicTape<S>&)>()
                    : [=, targets = std::move(targets), mask = std::move(mask)](BasicTape<S>& tp) {
                          double g = tp.grad(id)[0] / static_cast<double>(count);
                          auto& gl = tp.grad(logits);
                          const auto& v = tp.val(logits);
                          for (int64_t r = 0; r < n; ++r) {
                              if (!mask[static_cast<size_t>(r)]) continue;
                              double mx = -1e300;
                              for (int64_t c = 0; c < d; ++c)
                                  mx = std::max(mx, static_cast<double>(v.at(r, c)));
                              double sum = 0.0;
                              for (int64_t c = 0; c < d; ++c)
                                  sum += std::exp(static_cast<double>(v.at(r, c)) - mx);
                              for (int64_t c = 0; c < d; ++c) {
                                  double p = std::exp(static_cast<double>(v.at(r, c)) - mx) / sum;
                                  double onehot = (c == targets[static_cast<size_t>(r)]) ? 1.0 : 0.0;
                                  gl[static_cast<size_t>(r * d + c)] += g * (p - onehot);
                              }
                          }
                      });
    return id;
}

// Forward takes the quantized values; backward passes gradients straight to z.
template <class S>
typename BasicTape<S>::Id straight_through(BasicTape<S>& t, int32_t z,
                                           const BasicTensor<S>& quantized) {
    const auto& vz = t.val(z);
    if (vz.shape != quantized.shape) {
        throw ContractError("straight_through: shape mismatch " + vz.shape_str() + " vs " +
                            quantized.shape_str());
    }
    bool ng = t.needs_grad(z);
    const int32_t id = static_cast<int32_t>(t.size());
    t.push(quantized, ng, !ng ? std::function<void(BasicTape<S>&)>() : [=](BasicTape<S>& tp) {
        auto& g = tp.grad(id);
        auto& gz = tp.grad(z);
        for (size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
    });
    return id;
}

}  // namespace tape_ops
}  // namespace tamo
