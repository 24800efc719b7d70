#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "lat/model.hpp"
#include "lat/perturb.hpp"
#include "lat/rng.hpp"
#include "lat/tensor.hpp"

namespace lat {

enum class AttackMode { Targeted, Untargeted };
enum class AttackInit { Zero, UniformBall };

// PCA whitening of a d_model-dimensional activation distribution.
// whiten(x) = W (x - mu), dewhiten(z) = W_inv z + mu. Perturbations are
// linear displacements, so their projection uses W / W_inv without mu.
struct Whitener {
    Tensor mean;     // [d]
    Tensor w;        // [d, d]
    Tensor w_inv;    // [d, d]
    float lambda = 0.0f;

    int64_t dim() const { return mean.shape.empty() ? 0 : mean.shape[0]; }
    std::vector<float> whiten(const float* x) const;
    std::vector<float> dewhiten(const float* z) const;
};

struct AttackBudget {
    float epsilon = 1.0f;
    std::map<int, float> site_epsilon;  // per-layer overrides
    int pgd_steps = 16;
    float step_size = 0.0f;  // 0 -> epsilon / 4 per site
    AttackMode mode = AttackMode::Targeted;
    AttackInit init = AttackInit::Zero;
    bool aggregate_norm = false;  // bound the whole masked tensor instead of each position
    std::map<int, Whitener> site_whiteners;

    float epsilon_for(int layer) const {
        auto it = site_epsilon.find(layer);
        return it == site_epsilon.end() ? epsilon : it->second;
    }
    const Whitener* whitener_for(int layer) const {
        auto it = site_whiteners.find(layer);
        return it == site_whiteners.end() ? nullptr : &it->second;
    }
    float step_for(int layer) const { return step_size > 0.0f ? step_size : epsilon_for(layer) / 4.0f; }
    void validate() const;
};

// Scales each masked position's d-vector onto the epsilon ball; zeroes
// unmasked positions. Exactly idempotent.
Tensor project_l2(const Tensor& delta, const std::vector<float>& mask, float epsilon);

// Ball projection of the flattened masked region as a single vector.
Tensor project_l2_aggregate(const Tensor& delta, const std::vector<float>& mask, float epsilon);

// Per masked position: v <- W_inv clipball(W v, epsilon).
Tensor project_whitened(const Tensor& delta, const std::vector<float>& mask, float epsilon,
                        const Whitener& whitener);

// mu = sample mean; W = Lambda^{-1/2} E^T from the eigendecomposition of
// (cov + lambda I); W_inv = E Lambda^{1/2}.
Whitener fit_whitener(const Tensor& activation_sample, float lambda);

// Scalar objective of a PerturbationSet with gradients per site, evaluated
// against frozen parameters. Implementations wrap a loss graph; tests may
// substitute closed-form surrogates.
class AttackProblem {
   public:
    virtual ~AttackProblem() = default;
    virtual float value(const PerturbationSet& p) = 0;
    // gradient tensors keyed by site layer, same shapes as the deltas
    virtual std::pair<float, std::map<int, Tensor>> value_grad(const PerturbationSet& p) = 0;
};

// Projected gradient descent over the perturbation set. Targeted mode
// descends the objective, untargeted mode ascends it; steps are normalized
// per site over masked positions and followed by projection.
PerturbationSet run_pgd(AttackProblem& problem, const std::vector<HookSite>& sites, int seq_len,
                        int d_model, const std::vector<float>& mask, const AttackBudget& budget,
                        Rng& rng, int* nonfinite_resets = nullptr);

}  // namespace lat
