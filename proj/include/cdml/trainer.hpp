#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdml/data.hpp"
#include "cdml/losses.hpp"
#include "cdml/model.hpp"

namespace cdml {

/// Episodic meta-training schedule and optimizer settings. Both learning
/// rates halve every decay_steps; weight decay and momentum apply to the
/// outer update only.
struct TrainConfig {
    double alpha = 0.05;        // inner learning rate
    double beta = 0.05;         // outer learning rate
    double lambda = 0.7;        // L_s / L_t mix
    std::size_t batch = 8;      // triplets (and identities) per batch
    std::size_t steps = 500;    // outer iterations
    std::size_t decay_steps = 100;
    double weight_decay = 5e-4;
    double momentum = 0.9;
    bool second_order = false;  // differentiate through the inner update
    bool enable_cls = true;
    bool enable_trp = true;
    bool enable_cdt = true;
    bool cov_grad = false;      // keep covariances attached to the graph
    LmclForm lmcl_form = LmclForm::paper;
    std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    std::uint64_t seed = 1;

    void validate() const;

    double alpha_at(std::size_t step) const;
    double beta_at(std::size_t step) const;
};

struct TrainerSetup {
    TrainConfig train;
    LossConfig loss;
    ModelConfig model;  // num_classes may be 0; train() fills it from the data
};

/// Observability record for one (meta-test, meta-train) episode. Term values
/// are present only when the corresponding loss is enabled and computed.
struct EpisodeTrace {
    std::size_t step = 0;
    int meta_test_domain = 0;
    int meta_train_domain = 0;
    double loss_s = 0.0;
    double loss_t = 0.0;
    std::optional<double> cls_s, trp_s, cls_t, trp_t, cdt;
    double grad_contribution_norm = 0.0;

    std::string to_jsonl() const;
};

struct LossBreakdown {
    Tensor total;
    std::optional<double> cls, trp, cdt;
};

struct EpisodeResult {
    std::vector<std::vector<double>> grad;  // aligned with ModelParams::tensors()
    std::vector<EpisodeTrace> traces;
    // Covariances from the last meta-train batch, kept for inspection.
    std::optional<PairCovariance> sigma_pos;
    std::optional<PairCovariance> sigma_neg;
};

struct OptimizerState {
    std::vector<std::vector<double>> velocity;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpisodeTrace> traces;
    // Final-step covariances for offline inspection of the learned metrics.
    std::optional<PairCovariance> sigma_pos;
    std::optional<PairCovariance> sigma_neg;
};

/// Maps the union of identity labels over the given domains to class indices
/// [0, C), in sorted label order.
std::map<int, int> build_label_map(const std::vector<DomainDataset>& domains);

/// L_s: mean classification loss over all 3B images plus the triplet loss,
/// under the current parameters, honoring the loss toggles.
LossBreakdown meta_train_loss(const ModelParams& params, const TripletBatch& batch,
                              const TrainerSetup& setup, const std::map<int, int>& label_map);

/// L_t: classification + triplet under theta', plus the cross-domain triplet
/// term driven by the meta-train domain's covariances.
LossBreakdown meta_test_loss(const ModelParams& params_prime, const TripletBatch& batch,
                             const PairCovariance& sigma_pos, const PairCovariance& sigma_neg,
                             const TrainerSetup& setup, const std::map<int, int>& label_map);

/// One meta-test sweep: for every meta-train domain j != test_idx, samples
/// both batches, takes the inner step, and accumulates
/// lambda * grad(L_s) + (1 - lambda) * grad(L_t) into the returned
/// contribution. Gradients of L_t are second-order when configured.
EpisodeResult run_episode(const ModelParams& params, const std::vector<DomainDataset>& domains,
                          std::size_t test_idx, std::size_t step, const TrainerSetup& setup,
                          const std::map<int, int>& label_map, Rng& rng);

/// SGD with momentum and weight decay on the (beta/k)-scaled accumulated
/// gradient; mutates the parameter leaves in place.
void outer_update(ModelParams& params, const std::vector<std::vector<double>>& accumulated,
                  std::size_t domain_count, OptimizerState& state, const TrainConfig& cfg,
                  std::size_t step);

using CheckpointHook = std::function<void(std::size_t step, const ModelParams&)>;

/// Full episodic loop: every outer iteration sweeps each domain as meta-test,
/// accumulates k*(k-1) episode contributions into one gradient, and applies a
/// single outer update. Deterministic given the seed.
TrainResult train(const std::vector<DomainDataset>& domains, const TrainerSetup& setup,
                  const CheckpointHook& checkpoint_hook = nullptr);

}  // namespace cdml
