#ifndef MMDIFF_PARAMS_HPP
#define MMDIFF_PARAMS_HPP

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/tensor.hpp"

namespace mmdiff {

// Named parameter set with paired gradient buffers. Iteration follows
// insertion order so optimizer updates and checksums are reproducible.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor> values;
    std::vector<Tensor> grads;
    std::unordered_map<std::string, size_t> index;

    Tensor& add(const std::string& name, Tensor init) {
        if (index.count(name)) throw std::invalid_argument("param already exists: " + name);
        index[name] = names.size();
        names.push_back(name);
        grads.push_back(Tensor::zeros(init.shape));
        values.push_back(std::move(init));
        return values.back();
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    Tensor& value(const std::string& name) { return values[locate(name)]; }
    const Tensor& value(const std::string& name) const { return values[locate(name)]; }
    Tensor& grad(const std::string& name) { return grads[locate(name)]; }

    size_t locate(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("no such param: " + name);
        return it->second;
    }

    // tape leaf for a named parameter; gradient lands in this store
    ad::Var use(ad::Tape& tape, const std::string& name) {
        size_t i = locate(name);
        return tape.param(values[i], &grads[i]);
    }

    void zero_grads() {
        for (Tensor& g : grads) {
            for (double& e : g.v) e = 0.0;
        }
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const Tensor& t : values) n += t.numel();
        return n;
    }

    uint64_t checksum_all() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (size_t i = 0; i < names.size(); ++i) {
            h = fnv1a64(names[i].data(), names[i].size(), h);
            h = checksum(values[i], h);
        }
        return h;
    }
};

// Decoupled weight decay Adam. Moments are kept per parameter tensor, in
// registration order; bias correction uses the shared step counter.
struct AdamW {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t step_count = 0;

    struct Slot {
        Tensor* value;
        Tensor* grad;
        Tensor m;
        Tensor v;
    };
    std::vector<Slot> slots;

    void attach(ParamStore& store) {
        for (size_t i = 0; i < store.values.size(); ++i) {
            slots.push_back(Slot{&store.values[i], &store.grads[i],
                                 Tensor::zeros(store.values[i].shape),
                                 Tensor::zeros(store.values[i].shape)});
        }
    }
    void attach(Tensor* value, Tensor* grad) {
        slots.push_back(Slot{value, grad, Tensor::zeros(value->shape), Tensor::zeros(value->shape)});
    }

    void step() {
        step_count += 1;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (Slot& s : slots) {
            Tensor& w = *s.value;
            Tensor& g = *s.grad;
            for (int64_t i = 0; i < w.numel(); ++i) {
                double gi = g[i];
                s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * gi;
                s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * gi * gi;
                double mhat = s.m[i] / bc1;
                double vhat = s.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
        }
    }

    void zero_grads() {
        for (Slot& s : slots) {
            for (double& e : s.grad->v) e = 0.0;
        }
    }
};

}  // namespace mmdiff

#endif  // MMDIFF_PARAMS_HPP
