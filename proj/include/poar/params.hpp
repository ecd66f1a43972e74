#pragma once

// Named parameter storage and initializers.

#include <cmath>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "poar/rng.hpp"
#include "poar/tape.hpp"

namespace poar {

template <class Real>
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) noexcept = default;
    ParameterStore& operator=(ParameterStore&&) noexcept = default;

    Parameter<Real>& add(std::string name, BasicTensor<Real> value) {
        if (find(name)) throw validation_error("duplicate parameter name '" + name + "'");
        params_.push_back(std::make_unique<Parameter<Real>>(std::move(name), std::move(value)));
        return *params_.back();
    }

    Parameter<Real>* find(std::string_view name) {
        for (auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    Parameter<Real>& at(std::string_view name) {
        if (auto* p = find(name)) return *p;
        throw validation_error("no parameter named '" + std::string(name) + "'");
    }

    std::vector<Parameter<Real>*> all() const {
        std::vector<Parameter<Real>*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<Parameter<Real>>> params_;
};

template <class Real>
BasicTensor<Real> gaussian_init(Shape shape, double stddev, Rng& rng) {
    BasicTensor<Real> t(std::move(shape));
    for (auto& v : t.storage()) v = Real(rng.normal(0.0, stddev));
    return t;
}

// U(−1/√fan_in, 1/√fan_in) for a [fan_in × fan_out] projection.
template <class Real>
BasicTensor<Real> projection_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    BasicTensor<Real> t({fan_in, fan_out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.storage()) v = Real(rng.uniform(-bound, bound));
    return t;
}

}  // namespace poar
