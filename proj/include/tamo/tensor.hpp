#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tamo/errors.hpp"
#include "tamo/rng.hpp"

namespace tamo {

// Dense row-major tensor. Storage is float in production (BasicTensor<float>);
// the double instantiation exists for the finite-difference oracles.
template <class S>
struct BasicTensor {
    std::vector<int64_t> shape;
    std::vector<S> data;

    BasicTensor() = default;

    BasicTensor(std::vector<int64_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        check_invariants();
    }

    static BasicTensor zeros(std::vector<int64_t> shp) {
        int64_t n = count(shp);
        return BasicTensor(std::move(shp), std::vector<S>(static_cast<size_t>(n), S(0)));
    }

    static BasicTensor full(std::vector<int64_t> shp, S value) {
        int64_t n = count(shp);
        return BasicTensor(std::move(shp), std::vector<S>(static_cast<size_t>(n), value));
    }

    static BasicTensor randn(std::vector<int64_t> shp, Rng& rng, double stddev = 1.0) {
        int64_t n = count(shp);
        std::vector<S> v(static_cast<size_t>(n));
        for (auto& x : v) x = static_cast<S>(rng.normal(0.0, stddev));
        return BasicTensor(std::move(shp), std::move(v));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    // 2-D accessors; most of the model code works on matrices.
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const {
        if (shape.size() < 2) return shape.empty() ? 1 : 1;
        int64_t c = 1;
        for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    S& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    S at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    template <class T>
    BasicTensor<T> cast() const {
        std::vector<T> v(data.size());
        for (size_t i = 0; i < data.size(); ++i) v[i] = static_cast<T>(data[i]);
        return BasicTensor<T>(shape, std::move(v));
    }

private:
    static int64_t count(const std::vector<int64_t>& shp) {
        int64_t n = 1;
        for (int64_t d : shp) {
            if (d < 1) throw ContractError("tensor shape entries must be >= 1");
            n *= d;
        }
        return n;
    }

    void check_invariants() const {
        if (count(shape) != numel()) {
            throw ContractError("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str());
        }
    }
};

using Tensor = BasicTensor<float>;

}  // namespace tamo
