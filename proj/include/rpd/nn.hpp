#pragma once

// Named parameter storage, init helpers, small layer wrappers, Adam with
// group gating, cosine LR schedule.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rpd/autograd.hpp"

namespace rpd {

struct Param {
    std::string name;
    std::string group;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

// Owns all model parameters. Iteration order is creation order, which fixes
// container layout and checksum order.
class ParamStore {
public:
    Param& add(const std::string& name, const std::string& group, int64_t rows, int64_t cols) {
        RPD_CHECK(by_name_.find(name) == by_name_.end(), "duplicate param: ", name);
        auto p = std::make_unique<Param>();
        p->name = name;
        p->group = group;
        p->value = Tensor(rows, cols);
        p->grad = Tensor(rows, cols);
        Param* raw = p.get();
        owned_.push_back(std::move(p));
        order_.push_back(raw);
        by_name_[name] = raw;
        return *raw;
    }

    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

    Param& get(const std::string& name) {
        auto it = by_name_.find(name);
        RPD_CHECK(it != by_name_.end(), "unknown param: ", name);
        return *it->second;
    }
    const Param& get(const std::string& name) const {
        auto it = by_name_.find(name);
        RPD_CHECK(it != by_name_.end(), "unknown param: ", name);
        return *it->second;
    }

    const std::vector<Param*>& all() const { return order_; }

    std::vector<Param*> in_group(const std::string& group) const {
        std::vector<Param*> out;
        for (Param* p : order_)
            if (p->group == group) out.push_back(p);
        return out;
    }

    std::vector<std::string> group_names() const {
        std::vector<std::string> out;
        for (Param* p : order_)
            if (std::find(out.begin(), out.end(), p->group) == out.end()) out.push_back(p->group);
        return out;
    }

    void set_group_trainable(const std::string& group, bool trainable) {
        bool found = false;
        for (Param* p : order_)
            if (p->group == group) {
                p->trainable = trainable;
                found = true;
            }
        RPD_CHECK(found, "set_group_trainable: no such group: ", group);
    }

    void zero_grad() {
        for (Param* p : order_) p->grad.fill(0.0);
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (Param* p : order_) n += p->value.size();
        return n;
    }

    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ull;
        for (Param* p : order_) {
            h = mix64(h ^ hash_str(p->name));
            h = mix64(h ^ p->value.checksum());
        }
        return h;
    }

private:
    std::vector<std::unique_ptr<Param>> owned_;
    std::vector<Param*> order_;
    std::map<std::string, Param*> by_name_;
};

inline Var leaf(Tape& t, Param& p) { return t.param(&p.value, &p.grad, p.trainable); }

inline void init_trunc_normal(Rng& rng, Tensor& t, double stddev = 0.02) {
    for (double& x : t.v) x = rng.truncated_normal(stddev);
}

inline void init_normal(Rng& rng, Tensor& t, double mean, double stddev) {
    for (double& x : t.v) x = rng.normal(mean, stddev);
}

struct Linear {
    Param* w = nullptr;  // [out, in]
    Param* b = nullptr;  // [1, out]
};

inline Linear make_linear(ParamStore& ps, Rng& rng, const std::string& prefix,
                          const std::string& group, int64_t in, int64_t out,
                          double wstd = 0.02) {
    Linear l;
    l.w = &ps.add(prefix + ".w", group, out, in);
    l.b = &ps.add(prefix + ".b", group, 1, out);
    init_trunc_normal(rng, l.w->value, wstd);
    return l;
}

// Fan-in scale for the shallow MLPs outside the transformer trunk; the 0.02
// convention there starves them of signal at small widths.
inline double fanin_std(int64_t in) { return 1.0 / std::sqrt(double(in)); }

inline Var linear(Tape& t, Var x, const Linear& l) {
    return t.add_row(t.matmul(x, leaf(t, *l.w), false, true), leaf(t, *l.b));
}

struct LayerNormP {
    Param* g = nullptr;  // [1, dim]
    Param* b = nullptr;  // [1, dim]
};

inline LayerNormP make_layernorm(ParamStore& ps, const std::string& prefix,
                                 const std::string& group, int64_t dim) {
    LayerNormP ln;
    ln.g = &ps.add(prefix + ".g", group, 1, dim);
    ln.g->value.fill(1.0);
    ln.b = &ps.add(prefix + ".b", group, 1, dim);
    return ln;
}

inline Var layernorm(Tape& t, Var x, const LayerNormP& ln) {
    return t.layernorm_rows(x, leaf(t, *ln.g), leaf(t, *ln.b));
}

// eta_t = eta_0 * 0.5 * (1 + cos(pi * t / T)), t in [0, T).
inline double cosine_lr(double base, int64_t epoch, int64_t total_epochs) {
    RPD_CHECK(total_epochs > 0 && epoch >= 0 && epoch < total_epochs,
              "cosine_lr: epoch ", epoch, " of ", total_epochs);
    return base * 0.5 * (1.0 + std::cos(kPi * double(epoch) / double(total_epochs)));
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamSlot {
    Tensor m;
    Tensor v;
    int64_t t = 0;
};

// Adam with coupled L2 weight decay (decay added to the gradient). step()
// touches only trainable params whose group passes the filter; everything
// else keeps value, gradient and (absent) moments untouched, which is what
// makes the update-containment and resume checks exact.
class Adam {
public:
    Adam(ParamStore& ps, AdamConfig cfg) : ps_(&ps), cfg_(cfg), lr_(cfg.lr) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    const AdamConfig& config() const { return cfg_; }

    void step(const std::function<bool(const Param&)>& active) {
        for (Param* p : ps_->all()) {
            if (!p->trainable || !active(*p)) continue;
            AdamSlot& s = slots_[p->name];
            if (s.t == 0) {
                s.m = Tensor(p->value.rows, p->value.cols);
                s.v = Tensor(p->value.rows, p->value.cols);
            }
            s.t += 1;
            double bc1 = 1.0 - std::pow(cfg_.beta1, double(s.t));
            double bc2 = 1.0 - std::pow(cfg_.beta2, double(s.t));
            for (int64_t i = 0; i < p->value.size(); ++i) {
                double g = p->grad.v[size_t(i)] + cfg_.weight_decay * p->value.v[size_t(i)];
                RPD_CHECK_T(std::isfinite(g), NumericError, "Adam: non-finite gradient in ",
                            p->name);
                double& m = s.m.v[size_t(i)];
                double& v = s.v.v[size_t(i)];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
                p->value.v[size_t(i)] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            }
        }
    }

    bool has_slot(const std::string& name) const { return slots_.count(name) != 0; }
    std::map<std::string, AdamSlot>& slots() { return slots_; }
    const std::map<std::string, AdamSlot>& slots() const { return slots_; }

private:
    ParamStore* ps_;
    AdamConfig cfg_;
    double lr_;
    std::map<std::string, AdamSlot> slots_;
};

}  // namespace rpd
