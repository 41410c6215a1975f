#include "cdml/trainer.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "cdml/errors.hpp"

namespace cdml {

void TrainConfig::validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ContractError("TrainConfig: lambda must be in [0, 1]");
    if (alpha <= 0.0 || beta <= 0.0) throw ContractError("TrainConfig: alpha and beta must be > 0");
    if (batch < 2) throw ContractError("TrainConfig: batch must be >= 2");
    if (decay_steps == 0) throw ContractError("TrainConfig: decay_steps must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("TrainConfig: momentum in [0, 1)");
    if (weight_decay < 0.0) throw ContractError("TrainConfig: weight_decay must be >= 0");
}

namespace {

double decayed(double base, std::size_t step, std::size_t decay_steps) {
    return base * std::pow(2.0, -static_cast<double>(step / decay_steps));
}

}  // namespace

double TrainConfig::alpha_at(std::size_t step) const { return decayed(alpha, step, decay_steps); }
double TrainConfig::beta_at(std::size_t step) const { return decayed(beta, step, decay_steps); }

std::string EpisodeTrace::to_jsonl() const {
    nlohmann::json j;
    j["step"] = step;
    j["meta_test"] = meta_test_domain;
    j["meta_train"] = meta_train_domain;
    j["L_s"] = loss_s;
    j["L_t"] = loss_t;
    nlohmann::json terms = nlohmann::json::object();
    if (cls_s) terms["cls_s"] = *cls_s;
    if (trp_s) terms["trp_s"] = *trp_s;
    if (cls_t) terms["cls_t"] = *cls_t;
    if (trp_t) terms["trp_t"] = *trp_t;
    if (cdt) terms["cdt"] = *cdt;
    j["terms"] = terms;
    j["g_norm"] = grad_contribution_norm;
    return j.dump();
}

std::map<int, int> build_label_map(const std::vector<DomainDataset>& domains) {
    std::set<int> ids;
    for (const auto& ds : domains) {
        for (const auto& [id, idxs] : ds.identity_index) ids.insert(id);
    }
    std::map<int, int> out;
    int next = 0;
    for (int id : ids) out[id] = next++;
    return out;
}

namespace {

struct BatchViews {
    Tensor inputs;            // {3B, input_dim}: anchors, positives, negatives
    std::vector<int> labels;  // class indices for all 3B rows
    std::size_t batch = 0;
};

BatchViews assemble_batch(const TripletBatch& batch, const std::map<int, int>& label_map,
                          std::size_t input_dim) {
    const std::size_t b = batch.size();
    if (b == 0) throw ContractError("trainer: empty triplet batch");
    std::vector<double> data;
    data.reserve(3 * b * input_dim);
    auto push = [&](const std::vector<double>& x) {
        if (x.size() != input_dim) {
            throw DimensionError("trainer: sample dim " + std::to_string(x.size()) +
                                 " does not match model input_dim " + std::to_string(input_dim));
        }
        data.insert(data.end(), x.begin(), x.end());
    };
    for (const auto& e : batch.entries) push(e.anchor);
    for (const auto& e : batch.entries) push(e.positive);
    for (const auto& e : batch.entries) push(e.negative);

    BatchViews views;
    views.batch = b;
    views.inputs = Tensor::from_data({3 * b, input_dim}, std::move(data));
    views.labels.reserve(3 * b);
    auto mapped = [&](int identity) {
        auto it = label_map.find(identity);
        if (it == label_map.end()) {
            throw ContractError("trainer: identity " + std::to_string(identity) +
                                " missing from the label map");
        }
        return it->second;
    };
    for (const auto& e : batch.entries) views.labels.push_back(mapped(e.anchor_identity));
    for (const auto& e : batch.entries) views.labels.push_back(mapped(e.anchor_identity));
    for (const auto& e : batch.entries) views.labels.push_back(mapped(e.negative_identity));
    return views;
}

// Shared loss assembly over an already-computed representation block.
LossBreakdown losses_from_repr(const ModelParams& params, const Tensor& repr_rows,
                               const BatchViews& views, const TrainerSetup& setup,
                               const PairCovariance* sigma_pos, const PairCovariance* sigma_neg) {
    const TrainConfig& tc = setup.train;
    const LossConfig& lc = setup.loss;
    const std::size_t b = views.batch;

    LossBreakdown out;
    std::vector<Tensor> terms;
    if (tc.enable_cls) {
        Tensor cls = lmcl_loss_rows(l2_normalize_rows(repr_rows), views.labels,
                                    l2_normalize_rows(params.cls_weights), lc.s, lc.m,
                                    tc.lmcl_form);
        out.cls = cls.value();
        terms.push_back(cls);
    }
    if (tc.enable_trp) {
        Tensor embedded = embed_from_repr(params, repr_rows);
        Tensor trp = triplet_loss_rows(slice_rows(embedded, 0, b), slice_rows(embedded, b, 2 * b),
                                       slice_rows(embedded, 2 * b, 3 * b), lc.rho);
        out.trp = trp.value();
        terms.push_back(trp);
    }
    if (sigma_pos != nullptr && tc.enable_cdt) {
        const std::size_t hw = params.config.map_height * params.config.map_width;
        const std::size_t depth = params.config.map_depth;
        auto position_rows = [&](std::size_t lo) {
            return reshape(slice_rows(repr_rows, lo * b, (lo + 1) * b), {b * hw, depth});
        };
        Tensor cdt = cdt_loss_rows(position_rows(0), position_rows(1), position_rows(2), b,
                                   *sigma_pos, *sigma_neg, lc.tau);
        out.cdt = cdt.value();
        terms.push_back(cdt);
    }

    if (terms.empty()) {
        out.total = Tensor::scalar(0.0);
    } else {
        out.total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
    }
    if (!std::isfinite(out.total.value())) {
        throw NumericalError("trainer: non-finite loss value");
    }
    return out;
}

void accumulate_scaled(std::vector<std::vector<double>>& acc, const std::vector<Tensor>& grads,
                       double factor) {
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const auto& g = grads[i].data();
        for (std::size_t k = 0; k < g.size(); ++k) acc[i][k] += factor * g[k];
    }
}

}  // namespace

LossBreakdown meta_train_loss(const ModelParams& params, const TripletBatch& batch,
                              const TrainerSetup& setup, const std::map<int, int>& label_map) {
    BatchViews views = assemble_batch(batch, label_map, params.config.input_dim);
    Tensor repr = forward_repr_batch(params, views.inputs);
    return losses_from_repr(params, repr, views, setup, nullptr, nullptr);
}

LossBreakdown meta_test_loss(const ModelParams& params_prime, const TripletBatch& batch,
                             const PairCovariance& sigma_pos, const PairCovariance& sigma_neg,
                             const TrainerSetup& setup, const std::map<int, int>& label_map) {
    BatchViews views = assemble_batch(batch, label_map, params_prime.config.input_dim);
    Tensor repr = forward_repr_batch(params_prime, views.inputs);
    return losses_from_repr(params_prime, repr, views, setup, &sigma_pos, &sigma_neg);
}

EpisodeResult run_episode(const ModelParams& params, const std::vector<DomainDataset>& domains,
                          std::size_t test_idx, std::size_t step, const TrainerSetup& setup,
                          const std::map<int, int>& label_map, Rng& rng) {
    if (domains.size() < 2) {
        throw ContractError("run_episode: need at least two domains for a meta-train/meta-test split");
    }
    if (test_idx >= domains.size()) throw ContractError("run_episode: meta-test index out of range");
    const TrainConfig& tc = setup.train;
    const std::size_t hw = params.config.map_height * params.config.map_width;
    const std::size_t depth = params.config.map_depth;

    auto param_tensors = params.tensors();
    EpisodeResult result;
    result.grad.reserve(param_tensors.size());
    for (const auto& t : param_tensors) result.grad.emplace_back(t.numel(), 0.0);

    const bool meta_path = tc.lambda < 1.0;
    for (std::size_t j = 0; j < domains.size(); ++j) {
        if (j == test_idx) continue;
        TripletBatch batch_i = sample_triplets(domains[test_idx], tc.batch, rng);
        TripletBatch batch_j = sample_triplets(domains[j], tc.batch, rng);

        BatchViews views_j = assemble_batch(batch_j, label_map, params.config.input_dim);
        Tensor repr_j = forward_repr_batch(params, views_j.inputs);
        LossBreakdown ls = losses_from_repr(params, repr_j, views_j, setup, nullptr, nullptr);
        std::vector<Tensor> grads_s = grad_tensors(ls.total, param_tensors);

        EpisodeTrace trace;
        trace.step = step;
        trace.meta_test_domain = domains[test_idx].domain_id;
        trace.meta_train_domain = domains[j].domain_id;
        trace.loss_s = ls.total.value();
        trace.cls_s = ls.cls;
        trace.trp_s = ls.trp;

        std::vector<std::vector<double>> contribution(param_tensors.size());
        for (std::size_t p = 0; p < param_tensors.size(); ++p) {
            contribution[p].assign(param_tensors[p].numel(), 0.0);
        }
        auto add_into = [&](const std::vector<Tensor>& grads, double factor) {
            accumulate_scaled(contribution, grads, factor);
        };
        if (tc.lambda > 0.0) add_into(grads_s, tc.lambda);

        if (meta_path) {
            ModelParams prime =
                inner_update(params, grads_s, tc.alpha_at(step), tc.second_order);

            // Covariances come from the meta-train batch under pre-update
            // parameters; slice the sample-major blocks into position rows.
            const std::size_t b = views_j.batch;
            auto rows = [&](std::size_t lo) {
                return reshape(slice_rows(repr_j, lo * b, (lo + 1) * b), {b * hw, depth});
            };
            CovarianceOptions cov_opts{.connect_graph = tc.cov_grad};
            PairCovariance sigma_pos = estimate_covariance_from_diffs(
                sub(rows(0), rows(1)), Polarity::positive, cov_opts);
            PairCovariance sigma_neg = estimate_covariance_from_diffs(
                sub(rows(0), rows(2)), Polarity::negative, cov_opts);
            // Stored detached so the episode graph is not kept alive.
            result.sigma_pos = PairCovariance{sigma_pos.sigma.detach(), sigma_pos.mean.detach(),
                                              sigma_pos.sample_count, sigma_pos.polarity,
                                              sigma_pos.epsilon};
            result.sigma_neg = PairCovariance{sigma_neg.sigma.detach(), sigma_neg.mean.detach(),
                                              sigma_neg.sample_count, sigma_neg.polarity,
                                              sigma_neg.epsilon};

            BatchViews views_i = assemble_batch(batch_i, label_map, params.config.input_dim);
            Tensor repr_i = forward_repr_batch(prime, views_i.inputs);
            LossBreakdown lt =
                losses_from_repr(prime, repr_i, views_i, setup, &sigma_pos, &sigma_neg);
            trace.loss_t = lt.total.value();
            trace.cls_t = lt.cls;
            trace.trp_t = lt.trp;
            trace.cdt = lt.cdt;

            if (tc.lambda < 1.0) {
                std::vector<Tensor> wrt = tc.second_order ? param_tensors : prime.tensors();
                std::vector<Tensor> grads_t = grad_tensors(lt.total, wrt);
                add_into(grads_t, 1.0 - tc.lambda);
            }
        }

        double norm_sq = 0.0;
        for (std::size_t p = 0; p < contribution.size(); ++p) {
            for (std::size_t k = 0; k < contribution[p].size(); ++k) {
                norm_sq += contribution[p][k] * contribution[p][k];
                result.grad[p][k] += contribution[p][k];
            }
        }
        trace.grad_contribution_norm = std::sqrt(norm_sq);
        result.traces.push_back(std::move(trace));
    }
    return result;
}

void outer_update(ModelParams& params, const std::vector<std::vector<double>>& accumulated,
                  std::size_t domain_count, OptimizerState& state, const TrainConfig& cfg,
                  std::size_t step) {
    auto tensors = params.tensors();
    if (accumulated.size() != tensors.size()) {
        throw ContractError("outer_update: gradient/parameter count mismatch");
    }
    if (state.velocity.empty()) {
        state.velocity.resize(tensors.size());
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            state.velocity[i].assign(tensors[i].numel(), 0.0);
        }
    }
    const double lr = cfg.beta_at(step) / static_cast<double>(domain_count);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (accumulated[i].size() != tensors[i].numel()) {
            throw ContractError("outer_update: gradient " + std::to_string(i) +
                                " is misaligned with its parameter");
        }
        auto& theta = tensors[i].mutable_data();
        auto& vel = state.velocity[i];
        for (std::size_t k = 0; k < theta.size(); ++k) {
            const double g = accumulated[i][k] + cfg.weight_decay * theta[k];
            vel[k] = cfg.momentum * vel[k] + g;
            theta[k] -= lr * vel[k];
        }
    }
}

TrainResult train(const std::vector<DomainDataset>& domains, const TrainerSetup& setup,
                  const CheckpointHook& checkpoint_hook) {
    setup.train.validate();
    setup.loss.validate();
    validate_datasets(domains);
    if (domains.size() < 2) {
        throw ContractError("train: Algorithm needs at least two source domains");
    }

    auto label_map = build_label_map(domains);
    ModelConfig model_cfg = setup.model;
    model_cfg.num_classes = label_map.size();
    model_cfg.validate();

    TrainerSetup resolved = setup;
    resolved.model = model_cfg;

    Rng rng(setup.train.seed);
    ModelParams params = ModelParams::init(model_cfg, rng);
    OptimizerState opt_state;

    TrainResult result;
    for (std::size_t step = 0; step < setup.train.steps; ++step) {
        std::vector<std::vector<double>> accumulated;
        auto tensors = params.tensors();
        accumulated.reserve(tensors.size());
        for (const auto& t : tensors) accumulated.emplace_back(t.numel(), 0.0);

        for (std::size_t i = 0; i < domains.size(); ++i) {
            EpisodeResult ep;
            try {
                ep = run_episode(params, domains, i, step, resolved, label_map, rng);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
            }
            for (std::size_t p = 0; p < accumulated.size(); ++p) {
                for (std::size_t k = 0; k < accumulated[p].size(); ++k) {
                    accumulated[p][k] += ep.grad[p][k];
                }
            }
            for (auto& t : ep.traces) result.traces.push_back(std::move(t));
            if (ep.sigma_pos) result.sigma_pos = std::move(ep.sigma_pos);
            if (ep.sigma_neg) result.sigma_neg = std::move(ep.sigma_neg);
        }
        outer_update(params, accumulated, domains.size(), opt_state, setup.train, step);

        if (checkpoint_hook && setup.train.checkpoint_every > 0 &&
            (step + 1) % setup.train.checkpoint_every == 0) {
            checkpoint_hook(step + 1, params);
        }
    }
    result.params = std::move(params);
    return result;
}

}  // namespace cdml
