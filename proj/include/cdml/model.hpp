#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cdml/metrics.hpp"
#include "cdml/rng.hpp"
#include "cdml/tensor.hpp"

namespace cdml {

/// Architecture of the three sub-networks. The representation net maps
/// input_dim -> hidden_dim -> H*W*D; the flattened map is both the evaluation
/// feature space and the input to the classifier cosines and the embedding
/// projection (embed_dim <= H*W*D).
struct ModelConfig {
    std::size_t input_dim = 24;
    std::size_t hidden_dim = 48;
    std::size_t map_height = 2;
    std::size_t map_width = 2;
    std::size_t map_depth = 16;
    std::size_t embed_dim = 32;
    std::size_t num_classes = 0;  // filled from the training identity union

    std::size_t repr_dim() const { return map_height * map_width * map_depth; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// The parameter sets Theta = {theta_r, theta_c, theta_e}. Tensors are leaves
/// except inside a differentiable inner update, where they stay connected to
/// the originating Theta.
struct ModelParams {
    ModelConfig config;

    Tensor repr_w1;  // {hidden, input}
    Tensor repr_b1;  // {hidden}
    Tensor repr_w2;  // {repr_dim, hidden}
    Tensor repr_b2;  // {repr_dim}
    Tensor cls_weights;  // {num_classes, repr_dim}, identity rows w_y
    Tensor emb_w;    // {embed_dim, repr_dim}
    Tensor emb_b;    // {embed_dim}

    /// Fresh parameters, uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    static ModelParams init(const ModelConfig& cfg, Rng& rng);

    /// Stable (name, tensor) enumeration; the order never changes.
    std::vector<std::pair<std::string, Tensor>> named() const;
    std::vector<Tensor> tensors() const;

    /// Independent deep copy with detached leaf tensors.
    ModelParams clone() const;
};

/// theta' = theta - alpha * grad per tensor. With differentiable=true the
/// result stays graph-connected to theta (and to the gradients), so losses of
/// theta' backpropagate second-order terms into theta; otherwise theta' is a
/// fresh set of leaves.
ModelParams inner_update(const ModelParams& params, std::span<const Tensor> grads, double alpha,
                         bool differentiable);

// ---- forward passes --------------------------------------------------------

/// Flattened representation {n, repr_dim} for a batch of inputs {n, input_dim}.
Tensor forward_repr_batch(const ModelParams& params, const Tensor& inputs);

/// Feature map for a single input vector.
FeatureMap forward_repr(const ModelParams& params, const Tensor& input);

/// l2-normalized embedding rows {n, embed_dim} from flattened representations.
Tensor embed_from_repr(const ModelParams& params, const Tensor& repr_rows);
/// Cosines {n, num_classes} between normalized representations and the
/// normalized identity weight rows.
Tensor classify_from_repr(const ModelParams& params, const Tensor& repr_rows);

/// Full pipelines for a single input.
Tensor forward_embed(const ModelParams& params, const Tensor& input);
Tensor forward_classify(const ModelParams& params, const Tensor& input);

// ---- checkpoint ------------------------------------------------------------

std::string checkpoint_to_json(const ModelParams& params);
ModelParams checkpoint_from_json(const std::string& text);
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace cdml
