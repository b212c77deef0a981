#include "mapex/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mapex/errors.hpp"

namespace mapex {

namespace {

int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension");
        n *= d;
    }
    return n;
}

TensorImplPtr make_impl(std::vector<int> shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    return impl;
}

// interpret rank-1 tensors as a single row
std::pair<int, int> as_2d(const TensorImpl& t) {
    if (t.shape.size() == 1) return {1, t.shape[0]};
    if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
    throw DimensionError("expected rank 1 or 2 tensor");
}

Tensor unary_result(const Tensor& a, std::vector<int> shape, std::vector<double> data,
                    std::function<void(TensorImpl&)> bwd) {
    auto impl = make_impl(std::move(shape), std::move(data));
    impl->requires_grad = a.requires_grad();
    if (impl->requires_grad) {
        impl->parents = {a.impl()};
        impl->backward_fn = std::move(bwd);
    }
    return Tensor(impl);
}

Tensor binary_result(const Tensor& a, const Tensor& b, std::vector<int> shape,
                     std::vector<double> data, std::function<void(TensorImpl&)> bwd) {
    auto impl = make_impl(std::move(shape), std::move(data));
    impl->requires_grad = a.requires_grad() || b.requires_grad();
    if (impl->requires_grad) {
        impl->parents = {a.impl(), b.impl()};
        impl->backward_fn = std::move(bwd);
    }
    return Tensor(impl);
}

void accum(TensorImpl& p, const std::vector<double>& g) {
    if (!p.requires_grad && p.parents.empty()) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

bool wants_grad(const TensorImpl& p) { return p.requires_grad || !p.parents.empty(); }

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    int n = shape_numel(shape);
    auto impl = make_impl(std::move(shape), std::vector<double>(n, 0.0));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    int n = shape_numel(shape);
    auto impl = make_impl(std::move(shape), std::vector<double>(n, v));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<std::size_t>(shape_numel(shape)) != data.size())
        throw DimensionError("data length does not match shape");
    auto impl = make_impl(std::move(shape), std::move(data));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

int Tensor::rows() const { return as_2d(*impl_).first; }
int Tensor::cols() const { return as_2d(*impl_).second; }

std::vector<double>& Tensor::grad() {
    impl_->ensure_grad();
    return impl_->grad;
}

double Tensor::item() const {
    if (impl_->value.size() != 1) throw ContractError("item() on non-scalar tensor");
    return impl_->value[0];
}

// ---- elementwise with row broadcast --------------------------------------

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
    auto [ar, ac] = as_2d(*a.impl());
    auto [br, bc] = as_2d(*b.impl());
    const bool broadcast = (br == 1 && ar > 1 && bc == ac);
    if (!broadcast && (ar != br || ac != bc)) throw DimensionError("elementwise shape mismatch");

    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (int r = 0; r < ar; ++r) {
        for (int c = 0; c < ac; ++c) {
            double x = av[r * ac + c];
            double y = bv[(broadcast ? 0 : r) * ac + c];
            double v = 0.0;
            switch (kind) {
                case EwKind::Add: v = x + y; break;
                case EwKind::Sub: v = x - y; break;
                case EwKind::Mul: v = x * y; break;
            }
            out[r * ac + c] = v;
        }
    }
    auto bi = b.impl();
    auto ai = a.impl();
    int R = ar, C = ac;
    return binary_result(a, b, a.shape(), std::move(out), [=](TensorImpl& self) {
        if (wants_grad(*ai)) {
            std::vector<double> ga(self.grad);
            if (kind == EwKind::Mul) {
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c)
                        ga[r * C + c] *= bi->value[(broadcast ? 0 : r) * C + c];
            }
            accum(*ai, ga);
        }
        if (wants_grad(*bi)) {
            std::vector<double> gb(bi->value.size(), 0.0);
            for (int r = 0; r < R; ++r) {
                for (int c = 0; c < C; ++c) {
                    double g = self.grad[r * C + c];
                    if (kind == EwKind::Sub) g = -g;
                    if (kind == EwKind::Mul) g *= ai->value[r * C + c];
                    gb[(broadcast ? 0 : r) * C + c] += g;
                }
            }
            accum(*bi, gb);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul); }

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.value());
    for (double& v : out) v *= c;
    auto ai = a.impl();
    return unary_result(a, a.shape(), std::move(out), [=](TensorImpl& self) {
        std::vector<double> g(self.grad);
        for (double& v : g) v *= c;
        accum(*ai, g);
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.value());
    for (double& v : out) v += c;
    auto ai = a.impl();
    return unary_result(a, a.shape(), std::move(out),
                        [=](TensorImpl& self) { accum(*ai, self.grad); });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale_by expects a scalar tensor");
    double sv = s.value()[0];
    std::vector<double> out(a.value());
    for (double& v : out) v *= sv;
    auto ai = a.impl();
    auto si = s.impl();
    return binary_result(a, s, a.shape(), std::move(out), [=](TensorImpl& self) {
        if (wants_grad(*ai)) {
            std::vector<double> g(self.grad);
            for (double& v : g) v *= sv;
            accum(*ai, g);
        }
        if (wants_grad(*si)) {
            double gs = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) gs += self.grad[i] * ai->value[i];
            accum(*si, {gs});
        }
    });
}

Tensor div_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("div_by expects a scalar tensor");
    double sv = s.value()[0];
    std::vector<double> out(a.value());
    for (double& v : out) v /= sv;
    auto ai = a.impl();
    auto si = s.impl();
    return binary_result(a, s, a.shape(), std::move(out), [=](TensorImpl& self) {
        if (wants_grad(*ai)) {
            std::vector<double> g(self.grad);
            for (double& v : g) v /= sv;
            accum(*ai, g);
        }
        if (wants_grad(*si)) {
            double gs = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) gs += self.grad[i] * ai->value[i];
            accum(*si, {-gs / (sv * sv)});
        }
    });
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    auto [ar, ak] = as_2d(*a.impl());
    auto [bk, bc] = as_2d(*b.impl());
    if (ak != bk) throw DimensionError("matmul inner dimensions disagree");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(static_cast<std::size_t>(ar) * bc, 0.0);
    for (int i = 0; i < ar; ++i) {
        for (int k = 0; k < ak; ++k) {
            double x = av[i * ak + k];
            const double* brow = &bv[k * bc];
            double* orow = &out[i * bc];
            for (int j = 0; j < bc; ++j) orow[j] += x * brow[j];
        }
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return binary_result(a, b, {ar, bc}, std::move(out), [=](TensorImpl& self) {
        if (wants_grad(*ai)) {
            // a.grad += g . b^T
            std::vector<double> ga(static_cast<std::size_t>(ar) * ak, 0.0);
            for (int i = 0; i < ar; ++i)
                for (int j = 0; j < bc; ++j) {
                    double g = self.grad[i * bc + j];
                    for (int k = 0; k < ak; ++k) ga[i * ak + k] += g * bi->value[k * bc + j];
                }
            accum(*ai, ga);
        }
        if (wants_grad(*bi)) {
            // b.grad += a^T . g
            std::vector<double> gb(static_cast<std::size_t>(ak) * bc, 0.0);
            for (int i = 0; i < ar; ++i)
                for (int k = 0; k < ak; ++k) {
                    double x = ai->value[i * ak + k];
                    for (int j = 0; j < bc; ++j) gb[k * bc + j] += x * self.grad[i * bc + j];
                }
            accum(*bi, gb);
        }
    });
}

Tensor transpose(const Tensor& a) {
    auto [r, c] = as_2d(*a.impl());
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    auto ai = a.impl();
    return unary_result(a, {c, r}, std::move(out), [=](TensorImpl& self) {
        std::vector<double> g(ai->value.size());
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g[i * c + j] = self.grad[j * r + i];
        accum(*ai, g);
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.size()) throw DimensionError("reshape changes element count");
    auto ai = a.impl();
    return unary_result(a, std::move(shape), a.value(),
                        [=](TensorImpl& self) { accum(*ai, self.grad); });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows of empty list");
    int c = as_2d(*parts[0].impl()).second;
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        auto [pr, pc] = as_2d(*p.impl());
        if (pc != c) throw DimensionError("concat_rows column mismatch");
        total += pr;
        rg = rg || p.requires_grad();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * c);
    for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
    auto impl = make_impl({total, c}, std::move(out));
    impl->requires_grad = rg;
    if (rg) {
        for (const auto& p : parts) impl->parents.push_back(p.impl());
        impl->backward_fn = [c](TensorImpl& self) {
            std::size_t off = 0;
            for (auto& p : self.parents) {
                std::size_t n = p->value.size();
                if (wants_grad(*p)) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
                }
                off += n;
            }
        };
    }
    return Tensor(impl);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of empty list");
    int r = as_2d(*parts[0].impl()).first;
    int total = 0;
    bool rg = false;
    std::vector<int> widths;
    for (const auto& p : parts) {
        auto [pr, pc] = as_2d(*p.impl());
        if (pr != r) throw DimensionError("concat_cols row mismatch");
        widths.push_back(pc);
        total += pc;
        rg = rg || p.requires_grad();
    }
    std::vector<double> out(static_cast<std::size_t>(r) * total);
    int off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& pv = parts[pi].value();
        int w = widths[pi];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j) out[i * total + off + j] = pv[i * w + j];
        off += w;
    }
    auto impl = make_impl({r, total}, std::move(out));
    impl->requires_grad = rg;
    if (rg) {
        for (const auto& p : parts) impl->parents.push_back(p.impl());
        impl->backward_fn = [r, total, widths](TensorImpl& self) {
            int off = 0;
            for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                auto& p = self.parents[pi];
                int w = widths[pi];
                if (wants_grad(*p)) {
                    p->ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * total + off + j];
                }
                off += w;
            }
        };
    }
    return Tensor(impl);
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    auto [r, c] = as_2d(*a.impl());
    const auto& av = a.value();
    std::vector<double> out;
    out.reserve(idx.size() * c);
    for (int i : idx) {
        if (i < 0 || i >= r) throw DimensionError("gather_rows index out of range");
        out.insert(out.end(), av.begin() + static_cast<std::size_t>(i) * c,
                   av.begin() + static_cast<std::size_t>(i + 1) * c);
    }
    auto ai = a.impl();
    return unary_result(a, {static_cast<int>(idx.size()), c}, std::move(out),
                        [=](TensorImpl& self) {
                            std::vector<double> g(ai->value.size(), 0.0);
                            for (std::size_t n = 0; n < idx.size(); ++n)
                                for (int j = 0; j < c; ++j) g[idx[n] * c + j] += self.grad[n * c + j];
                            accum(*ai, g);
                        });
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& idx) {
    auto [r, c] = as_2d(*a.impl());
    const auto& av = a.value();
    int w = static_cast<int>(idx.size());
    std::vector<double> out(static_cast<std::size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        for (int n = 0; n < w; ++n) {
            if (idx[n] < 0 || idx[n] >= c) throw DimensionError("gather_cols index out of range");
            out[i * w + n] = av[i * c + idx[n]];
        }
    auto ai = a.impl();
    std::vector<int> out_shape =
        (a.shape().size() == 1) ? std::vector<int>{w} : std::vector<int>{r, w};
    return unary_result(a, std::move(out_shape), std::move(out), [=](TensorImpl& self) {
        std::vector<double> g(ai->value.size(), 0.0);
        for (int i = 0; i < r; ++i)
            for (int n = 0; n < w; ++n) g[i * c + idx[n]] += self.grad[i * w + n];
        accum(*ai, g);
    });
}

// ---- nonlinearities --------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    auto [r, c] = as_2d(*a.impl());
    if (axis != 0 && axis != 1) throw DimensionError("softmax axis must be 0 or 1");
    if (a.shape().size() == 1) axis = 1;
    const auto& av = a.value();
    std::vector<double> out(av.size());
    int outer = (axis == 1) ? r : c;
    int inner = (axis == 1) ? c : r;
    auto at = [axis = axis, c = c](int o, int i) -> std::size_t {
        return (axis == 1) ? static_cast<std::size_t>(o) * c + i : static_cast<std::size_t>(i) * c + o;
    };
    for (int o = 0; o < outer; ++o) {
        double mx = -1e300;
        for (int i = 0; i < inner; ++i) mx = std::max(mx, av[at(o, i)]);
        double z = 0.0;
        for (int i = 0; i < inner; ++i) z += std::exp(av[at(o, i)] - mx);
        for (int i = 0; i < inner; ++i) out[at(o, i)] = std::exp(av[at(o, i)] - mx) / z;
    }
    auto ai = a.impl();
    return unary_result(a, a.shape(), std::move(out), [=](TensorImpl& self) {
        std::vector<double> g(ai->value.size());
        for (int o = 0; o < outer; ++o) {
            double dot = 0.0;
            for (int i = 0; i < inner; ++i) dot += self.grad[at(o, i)] * self.value[at(o, i)];
            for (int i = 0; i < inner; ++i)
                g[at(o, i)] = self.value[at(o, i)] * (self.grad[at(o, i)] - dot);
        }
        accum(*ai, g);
    });
}

Tensor gelu(const Tensor& a) {
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * M_SQRT1_2));
    auto ai = a.impl();
    return unary_result(a, a.shape(), std::move(out), [=](TensorImpl& self) {
        std::vector<double> g(ai->value.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = ai->value[i];
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            g[i] = self.grad[i] * (cdf + x * pdf);
        }
        accum(*ai, g);
    });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    auto [r, c] = as_2d(*a.impl());
    if (gamma.size() != c || beta.size() != c) throw DimensionError("layer_norm affine size mismatch");
    if (eps <= 0) throw DimensionError("layer_norm eps must be positive");
    const auto& av = a.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    std::vector<double> out(av.size());
    std::vector<double> means(r), istds(r);
    for (int i = 0; i < r; ++i) {
        double m = 0.0;
        for (int j = 0; j < c; ++j) m += av[i * c + j];
        m /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = av[i * c + j] - m;
            var += d * d;
        }
        var /= c;
        double istd = 1.0 / std::sqrt(var + eps);
        means[i] = m;
        istds[i] = istd;
        for (int j = 0; j < c; ++j) out[i * c + j] = (av[i * c + j] - m) * istd * gv[j] + bv[j];
    }
    auto ai = a.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    auto impl = make_impl(a.shape(), std::move(out));
    impl->requires_grad = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (impl->requires_grad) {
        impl->parents = {ai, gi, bi};
        impl->backward_fn = [=](TensorImpl& self) {
            std::vector<double> ga(ai->value.size(), 0.0);
            std::vector<double> gg(gi->value.size(), 0.0);
            std::vector<double> gb(bi->value.size(), 0.0);
            for (int i = 0; i < r; ++i) {
                double istd = istds[i], m = means[i];
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (int j = 0; j < c; ++j) {
                    double xhat = (ai->value[i * c + j] - m) * istd;
                    double gy = self.grad[i * c + j];
                    gb[j] += gy;
                    gg[j] += gy * xhat;
                    double gxhat = gy * gi->value[j];
                    sum_gy += gxhat;
                    sum_gyx += gxhat * xhat;
                }
                for (int j = 0; j < c; ++j) {
                    double xhat = (ai->value[i * c + j] - m) * istd;
                    double gxhat = self.grad[i * c + j] * gi->value[j];
                    ga[i * c + j] = istd * (gxhat - sum_gy / c - xhat * sum_gyx / c);
                }
            }
            if (wants_grad(*ai)) accum(*ai, ga);
            if (wants_grad(*gi)) accum(*gi, gg);
            if (wants_grad(*bi)) accum(*bi, gb);
        };
    }
    return Tensor(impl);
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    auto ai = a.impl();
    return unary_result(a, {1}, {s}, [=](TensorImpl& self) {
        std::vector<double> g(ai->value.size(), self.grad[0]);
        accum(*ai, g);
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / a.size()); }

Tensor mse_masked(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    if (pred.size() != target.size() || pred.size() != mask.size())
        throw DimensionError("mse_masked operand sizes disagree");
    const auto& pv = pred.value();
    const auto& tv = target.value();
    const auto& mv = mask.value();
    double msum = 0.0;
    for (double m : mv) {
        if (m != 0.0 && m != 1.0) throw ContractError("mse_masked mask must be binary");
        msum += m;
    }
    if (msum == 0.0) throw ContractError("mse_masked mask is all zero");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        double d = pv[i] - tv[i];
        s += mv[i] * d * d;
    }
    auto pi = pred.impl();
    auto ti = target.impl();
    auto mi = mask.impl();
    auto impl = make_impl({1}, {s / msum});
    impl->requires_grad = pred.requires_grad();
    if (impl->requires_grad) {
        impl->parents = {pi};
        impl->backward_fn = [=](TensorImpl& self) {
            std::vector<double> g(pi->value.size());
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] = self.grad[0] * 2.0 * mi->value[i] * (pi->value[i] - ti->value[i]) / msum;
            accum(*pi, g);
        };
    }
    return Tensor(impl);
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    auto [r, c] = as_2d(*logits.impl());
    if (static_cast<int>(labels.size()) != r) throw DimensionError("label count mismatch");
    const auto& lv = logits.value();
    std::vector<double> probs(lv.size());
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        if (labels[i] < 0 || labels[i] >= c) throw ContractError("label out of range");
        double mx = -1e300;
        for (int j = 0; j < c; ++j) mx = std::max(mx, lv[i * c + j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(lv[i * c + j] - mx);
        for (int j = 0; j < c; ++j) probs[i * c + j] = std::exp(lv[i * c + j] - mx) / z;
        loss -= std::log(std::max(probs[i * c + labels[i]], 1e-300));
    }
    loss /= r;
    auto li = logits.impl();
    return unary_result(logits, {1}, {loss}, [=](TensorImpl& self) {
        std::vector<double> g(li->value.size());
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                g[i * c + j] = self.grad[0] * (probs[i * c + j] - (labels[i] == j ? 1.0 : 0.0)) / r;
        accum(*li, g);
    });
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
    // iterative DFS for reverse topological order
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            TensorImpl* p = node->parents[child++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace mapex
