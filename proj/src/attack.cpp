#include "lat/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lat {

void AttackBudget::validate() const {
    if (epsilon < 0.0f) throw std::invalid_argument("attack budget: epsilon must be >= 0");
    for (const auto& [layer, eps] : site_epsilon)
        if (eps < 0.0f) throw std::invalid_argument("attack budget: site epsilon must be >= 0");
    if (pgd_steps < 0) throw std::invalid_argument("attack budget: pgd_steps must be >= 0");
    if (step_size < 0.0f) throw std::invalid_argument("attack budget: step_size must be >= 0");
}

namespace {

void shape_check(const Tensor& delta, const std::vector<float>& mask) {
    if (delta.shape.size() != 2) throw std::invalid_argument("projection: delta must be [seq, d]");
    if (static_cast<size_t>(delta.shape[0]) != mask.size())
        throw std::invalid_argument("projection: mask length mismatch");
}

// Scales w (already multiplied by eps/norm) down by one ulp at a time until
// its double-evaluated norm is inside the ball, so a second projection is a
// bitwise no-op.
void settle_into_ball(float* w, int64_t d, double eps2) {
    for (;;) {
        double n2 = 0.0;
        for (int64_t c = 0; c < d; ++c) n2 += static_cast<double>(w[c]) * static_cast<double>(w[c]);
        if (n2 <= eps2) return;
        for (int64_t c = 0; c < d; ++c) w[c] *= 0.99999994f;
    }
}

}  // namespace

Tensor project_l2(const Tensor& delta, const std::vector<float>& mask, float epsilon) {
    if (epsilon < 0.0f) throw std::invalid_argument("project_l2: negative epsilon");
    shape_check(delta, mask);
    const int64_t s = delta.shape[0], d = delta.shape[1];
    Tensor out = delta;
    const double eps2 = static_cast<double>(epsilon) * static_cast<double>(epsilon);
    for (int64_t p = 0; p < s; ++p) {
        float* v = out.f.data() + p * d;
        if (mask[static_cast<size_t>(p)] == 0.0f) {
            std::fill(v, v + d, 0.0f);
            continue;
        }
        double n2 = 0.0;
        for (int64_t c = 0; c < d; ++c) n2 += static_cast<double>(v[c]) * static_cast<double>(v[c]);
        if (n2 <= eps2) continue;
        float scale = static_cast<float>(static_cast<double>(epsilon) / std::sqrt(n2));
        for (int64_t c = 0; c < d; ++c) v[c] *= scale;
        settle_into_ball(v, d, eps2);
    }
    return out;
}

Tensor project_l2_aggregate(const Tensor& delta, const std::vector<float>& mask, float epsilon) {
    if (epsilon < 0.0f) throw std::invalid_argument("project_l2_aggregate: negative epsilon");
    shape_check(delta, mask);
    const int64_t s = delta.shape[0], d = delta.shape[1];
    Tensor out = delta;
    for (int64_t p = 0; p < s; ++p)
        if (mask[static_cast<size_t>(p)] == 0.0f)
            std::fill(out.f.data() + p * d, out.f.data() + (p + 1) * d, 0.0f);
    const double eps2 = static_cast<double>(epsilon) * static_cast<double>(epsilon);
    double n2 = 0.0;
    for (float v : out.f) n2 += static_cast<double>(v) * static_cast<double>(v);
    if (n2 <= eps2) return out;
    float scale = static_cast<float>(static_cast<double>(epsilon) / std::sqrt(n2));
    for (float& v : out.f) v *= scale;
    settle_into_ball(out.f.data(), static_cast<int64_t>(out.f.size()), eps2);
    return out;
}

std::vector<float> Whitener::whiten(const float* x) const {
    const int64_t d = dim();
    std::vector<float> z(static_cast<size_t>(d), 0.0f);
    for (int64_t r = 0; r < d; ++r) {
        float acc = 0.0f;
        const float* wr = w.f.data() + r * d;
        for (int64_t c = 0; c < d; ++c) acc += wr[c] * (x[c] - mean.f[static_cast<size_t>(c)]);
        z[static_cast<size_t>(r)] = acc;
    }
    return z;
}

std::vector<float> Whitener::dewhiten(const float* z) const {
    const int64_t d = dim();
    std::vector<float> x(static_cast<size_t>(d), 0.0f);
    for (int64_t r = 0; r < d; ++r) {
        float acc = 0.0f;
        const float* wr = w_inv.f.data() + r * d;
        for (int64_t c = 0; c < d; ++c) acc += wr[c] * z[static_cast<size_t>(c)];
        x[static_cast<size_t>(r)] = acc + mean.f[static_cast<size_t>(r)];
    }
    return x;
}

Tensor project_whitened(const Tensor& delta, const std::vector<float>& mask, float epsilon,
                        const Whitener& whitener) {
    if (epsilon < 0.0f) throw std::invalid_argument("project_whitened: negative epsilon");
    shape_check(delta, mask);
    const int64_t s = delta.shape[0], d = delta.shape[1];
    if (whitener.dim() != d) throw std::invalid_argument("project_whitened: whitener dimension mismatch");
    Tensor out = delta;
    const double eps2 = static_cast<double>(epsilon) * static_cast<double>(epsilon);
    std::vector<float> z(static_cast<size_t>(d));
    for (int64_t p = 0; p < s; ++p) {
        float* v = out.f.data() + p * d;
        if (mask[static_cast<size_t>(p)] == 0.0f) {
            std::fill(v, v + d, 0.0f);
            continue;
        }
        // linear part only: deltas are displacements, not points
        for (int64_t r = 0; r < d; ++r) {
            float acc = 0.0f;
            const float* wr = whitener.w.f.data() + r * d;
            for (int64_t c = 0; c < d; ++c) acc += wr[c] * v[c];
            z[static_cast<size_t>(r)] = acc;
        }
        double n2 = 0.0;
        for (int64_t c = 0; c < d; ++c) n2 += static_cast<double>(z[static_cast<size_t>(c)]) * z[static_cast<size_t>(c)];
        if (n2 > eps2) {
            float scale = static_cast<float>(static_cast<double>(epsilon) / std::sqrt(n2));
            for (int64_t c = 0; c < d; ++c) z[static_cast<size_t>(c)] *= scale;
            settle_into_ball(z.data(), d, eps2);
            for (int64_t r = 0; r < d; ++r) {
                float acc = 0.0f;
                const float* wr = whitener.w_inv.f.data() + r * d;
                for (int64_t c = 0; c < d; ++c) acc += wr[c] * z[static_cast<size_t>(c)];
                v[r] = acc;
            }
        }
    }
    return out;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. a is destroyed;
// eigenvectors land in the columns of v.
void jacobi_eigen(std::vector<double>& a, std::vector<double>& v, int64_t n) {
    v.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p * n + q)] * a[static_cast<size_t>(p * n + q)];
        if (off < 1e-22) break;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = a[static_cast<size_t>(p * n + q)];
                if (std::fabs(apq) < 1e-300) continue;
                double app = a[static_cast<size_t>(p * n + p)], aqq = a[static_cast<size_t>(q * n + q)];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    double akp = a[static_cast<size_t>(k * n + p)], akq = a[static_cast<size_t>(k * n + q)];
                    a[static_cast<size_t>(k * n + p)] = c * akp - s * akq;
                    a[static_cast<size_t>(k * n + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double apk = a[static_cast<size_t>(p * n + k)], aqk = a[static_cast<size_t>(q * n + k)];
                    a[static_cast<size_t>(p * n + k)] = c * apk - s * aqk;
                    a[static_cast<size_t>(q * n + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double vkp = v[static_cast<size_t>(k * n + p)], vkq = v[static_cast<size_t>(k * n + q)];
                    v[static_cast<size_t>(k * n + p)] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k * n + q)] = s * vkp + c * vkq;
                }
            }
        }
    }
}

}  // namespace

Whitener fit_whitener(const Tensor& activation_sample, float lambda) {
    if (activation_sample.shape.size() != 2)
        throw std::invalid_argument("fit_whitener: sample must be [n, d]");
    const int64_t n = activation_sample.shape[0], d = activation_sample.shape[1];
    if (n < d) throw std::invalid_argument("fit_whitener: need at least d samples");
    if (lambda <= 0.0f) throw std::invalid_argument("fit_whitener: lambda must be > 0");

    Whitener w;
    w.lambda = lambda;
    w.mean = Tensor::zeros({d});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) w.mean.f[static_cast<size_t>(c)] += activation_sample.f[static_cast<size_t>(r * d + c)];
    for (int64_t c = 0; c < d; ++c) w.mean.f[static_cast<size_t>(c)] /= static_cast<float>(n);

    std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
    for (int64_t r = 0; r < n; ++r) {
        const float* x = activation_sample.f.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            double xi = static_cast<double>(x[i]) - w.mean.f[static_cast<size_t>(i)];
            for (int64_t j = i; j < d; ++j) {
                double xj = static_cast<double>(x[j]) - w.mean.f[static_cast<size_t>(j)];
                cov[static_cast<size_t>(i * d + j)] += xi * xj;
            }
        }
    }
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i; j < d; ++j) {
            double v = cov[static_cast<size_t>(i * d + j)] / static_cast<double>(n - 1 > 0 ? n - 1 : 1);
            cov[static_cast<size_t>(i * d + j)] = v;
            cov[static_cast<size_t>(j * d + i)] = v;
        }
    for (int64_t i = 0; i < d; ++i) cov[static_cast<size_t>(i * d + i)] += static_cast<double>(lambda);

    std::vector<double> evec;
    jacobi_eigen(cov, evec, d);  // cov now holds eigenvalues on its diagonal

    // symmetric (ZCA) form: W = E diag(lambda^-1/2) E^T stays aligned with the
    // activation basis, so an already-white sample maps through identity
    w.w = Tensor::zeros({d, d});
    w.w_inv = Tensor::zeros({d, d});
    for (int64_t k = 0; k < d; ++k) {
        double lam = cov[static_cast<size_t>(k * d + k)];
        if (lam <= 0.0) throw std::runtime_error("fit_whitener: non-positive eigenvalue");
        double inv_sqrt = 1.0 / std::sqrt(lam), sqrt_lam = std::sqrt(lam);
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j) {
                double eik = evec[static_cast<size_t>(i * d + k)];
                double ejk = evec[static_cast<size_t>(j * d + k)];
                w.w.f[static_cast<size_t>(i * d + j)] += static_cast<float>(inv_sqrt * eik * ejk);
                w.w_inv.f[static_cast<size_t>(i * d + j)] += static_cast<float>(sqrt_lam * eik * ejk);
            }
    }
    return w;
}

PerturbationSet run_pgd(AttackProblem& problem, const std::vector<HookSite>& sites, int seq_len,
                        int d_model, const std::vector<float>& mask, const AttackBudget& budget,
                        Rng& rng, int* nonfinite_resets) {
    budget.validate();
    if (static_cast<int>(mask.size()) != seq_len) throw std::invalid_argument("run_pgd: mask length mismatch");

    auto project = [&](const Tensor& t, int layer) {
        float eps = budget.epsilon_for(layer);
        if (const Whitener* w = budget.whitener_for(layer)) return project_whitened(t, mask, eps, *w);
        if (budget.aggregate_norm) return project_l2_aggregate(t, mask, eps);
        return project_l2(t, mask, eps);
    };

    auto make_init = [&]() {
        PerturbationSet p;
        p.mask = mask;
        for (const HookSite& s : sites) {
            Tensor d = Tensor::zeros({seq_len, d_model});
            float eps = budget.epsilon_for(s.layer_index);
            if (budget.init == AttackInit::UniformBall && eps > 0.0f) {
                for (int pos = 0; pos < seq_len; ++pos) {
                    if (mask[static_cast<size_t>(pos)] == 0.0f) continue;
                    // normal direction scaled to a uniform radius in the ball
                    double n2 = 0.0;
                    std::vector<float> dir(static_cast<size_t>(d_model));
                    for (int c = 0; c < d_model; ++c) {
                        dir[static_cast<size_t>(c)] = rng.normal();
                        n2 += static_cast<double>(dir[static_cast<size_t>(c)]) * dir[static_cast<size_t>(c)];
                    }
                    double norm = std::sqrt(std::max(n2, 1e-30));
                    double radius = eps * std::pow(rng.uniform(), 1.0 / d_model);
                    for (int c = 0; c < d_model; ++c)
                        d.f[static_cast<size_t>(pos) * d_model + c] = static_cast<float>(dir[static_cast<size_t>(c)] / norm * radius);
                }
            }
            p.sites.push_back({s.layer_index, project(d, s.layer_index)});
        }
        return p;
    };

    PerturbationSet p = make_init();
    bool all_zero = true;
    for (const HookSite& s : sites)
        if (budget.epsilon_for(s.layer_index) > 0.0f) all_zero = false;
    if (all_zero || budget.pgd_steps == 0 || sites.empty()) return p;

    const float sign = budget.mode == AttackMode::Targeted ? -1.0f : 1.0f;

    for (int it = 0; it < budget.pgd_steps; ++it) {
        auto [loss, grads] = problem.value_grad(p);
        bool finite = std::isfinite(loss);
        for (const auto& [layer, g] : grads)
            if (!g.all_finite()) finite = false;
        if (!finite) {
            if (nonfinite_resets) ++(*nonfinite_resets);
            p = make_init();
            continue;
        }
        for (SiteDelta& sd : p.sites) {
            const Tensor& g = grads.at(sd.layer);
            double n2 = 0.0;
            for (float v : g.f) n2 += static_cast<double>(v) * static_cast<double>(v);
            if (n2 <= 0.0) continue;
            float inv = static_cast<float>(1.0 / std::sqrt(n2));
            float eta = budget.step_for(sd.layer);
            for (size_t e = 0; e < sd.delta.f.size(); ++e)
                sd.delta.f[e] += sign * eta * g.f[e] * inv;
            sd.delta = project(sd.delta, sd.layer);
        }
    }
    return p;
}

}  // namespace lat
