#include "cdml/losses.hpp"

#include <cmath>
#include <string>

#include "cdml/errors.hpp"

namespace cdml {

namespace {

void check_unit_rows(const Tensor& m, const char* what) {
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    const auto& d = m.data();
    for (std::size_t i = 0; i < rows; ++i) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < cols; ++j) n2 += d[i * cols + j] * d[i * cols + j];
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
            throw ContractError(std::string(what) + ": row " + std::to_string(i) +
                                " is not l2-normalized (norm " + std::to_string(std::sqrt(n2)) +
                                ")");
        }
    }
}

Tensor stack_vectors(std::span<const Tensor> vecs, const char* what) {
    if (vecs.empty()) throw ContractError(std::string(what) + ": empty batch");
    std::vector<Tensor> rows;
    rows.reserve(vecs.size());
    const std::size_t dim = vecs.front().rank() == 1 ? vecs.front().shape()[0] : 0;
    for (const auto& v : vecs) {
        if (v.rank() != 1 || v.shape()[0] != dim || dim == 0) {
            throw DimensionError(std::string(what) + ": expected equal rank-1 vectors, got " +
                                 shape_to_string(v.shape()));
        }
        rows.push_back(reshape(v, {1, dim}));
    }
    return concat_rows(rows);
}

Tensor stack_position_rows(std::span<const FeatureMap> maps, const char* what) {
    std::vector<Tensor> parts;
    parts.reserve(maps.size());
    for (const auto& m : maps) parts.push_back(m.flatten());
    if (parts.empty()) throw ContractError(std::string(what) + ": empty batch");
    return concat_rows(parts);
}

}  // namespace

void LossConfig::validate() const {
    if (tau <= 0.0) throw ContractError("LossConfig: tau must be > 0");
    if (rho <= 0.0) throw ContractError("LossConfig: rho must be > 0");
    if (s <= 0.0) throw ContractError("LossConfig: s must be > 0");
    if (m < 0.0 || m >= 1.0) throw ContractError("LossConfig: m must be in [0, 1)");
}

Tensor cdt_loss_rows(const Tensor& anchor_rows, const Tensor& positive_rows,
                     const Tensor& negative_rows, std::size_t batch,
                     const PairCovariance& sigma_pos, const PairCovariance& sigma_neg,
                     double tau) {
    if (batch == 0) throw ContractError("cdt_loss: empty batch");
    if (anchor_rows.shape() != positive_rows.shape() ||
        anchor_rows.shape() != negative_rows.shape()) {
        throw DimensionError("cdt_loss: mismatched row blocks");
    }
    const std::size_t total = anchor_rows.shape()[0];
    const std::size_t depth = anchor_rows.shape()[1];
    if (total % batch != 0) {
        throw DimensionError("cdt_loss: row count " + std::to_string(total) +
                             " not divisible by batch " + std::to_string(batch));
    }
    if (sigma_pos.dim() != depth || sigma_neg.dim() != depth) {
        throw DimensionError("cdt_loss: covariance dim " + std::to_string(sigma_pos.dim()) + "/" +
                             std::to_string(sigma_neg.dim()) + " does not match feature depth " +
                             std::to_string(depth));
    }
    const std::size_t positions = total / batch;

    Tensor diff_pos = sub(anchor_rows, positive_rows);
    Tensor diff_neg = sub(anchor_rows, negative_rows);
    Tensor q_pos = mahalanobis_sq_rows(diff_pos, sigma_pos);  // {B*HW}
    Tensor q_neg = mahalanobis_sq_rows(diff_neg, sigma_neg);
    Tensor d_pos = reduce_mean(reshape(q_pos, {batch, positions}), {1});  // {B}
    Tensor d_neg = reduce_mean(reshape(q_neg, {batch, positions}), {1});
    Tensor hinge = relu(add_const(sub(d_pos, d_neg), tau));
    return reduce_mean(hinge);
}

Tensor cdt_loss(const TripletFeatureMaps& triplets, const PairCovariance& sigma_pos,
                const PairCovariance& sigma_neg, double tau) {
    if (triplets.size() == 0) throw ContractError("cdt_loss: empty batch");
    if (triplets.positives.size() != triplets.size() ||
        triplets.negatives.size() != triplets.size()) {
        throw ContractError("cdt_loss: anchor/positive/negative counts differ");
    }
    Tensor a = stack_position_rows(triplets.anchors, "cdt_loss");
    Tensor p = stack_position_rows(triplets.positives, "cdt_loss");
    Tensor n = stack_position_rows(triplets.negatives, "cdt_loss");
    return cdt_loss_rows(a, p, n, triplets.size(), sigma_pos, sigma_neg, tau);
}

Tensor triplet_loss_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                         double rho) {
    if (anchors.rank() != 2 || anchors.shape() != positives.shape() ||
        anchors.shape() != negatives.shape()) {
        throw DimensionError("triplet_loss: mismatched embedding blocks");
    }
    if (anchors.shape()[0] == 0) throw ContractError("triplet_loss: empty batch");
    check_unit_rows(anchors, "triplet_loss anchors");
    check_unit_rows(positives, "triplet_loss positives");
    check_unit_rows(negatives, "triplet_loss negatives");

    Tensor dp = sub(anchors, positives);
    Tensor dn = sub(anchors, negatives);
    Tensor d_pos = reduce_sum(mul(dp, dp), {1});
    Tensor d_neg = reduce_sum(mul(dn, dn), {1});
    return reduce_mean(relu(add_const(sub(d_pos, d_neg), rho)));
}

Tensor triplet_loss(std::span<const Tensor> anchors, std::span<const Tensor> positives,
                    std::span<const Tensor> negatives, double rho) {
    if (anchors.size() != positives.size() || anchors.size() != negatives.size()) {
        throw ContractError("triplet_loss: anchor/positive/negative counts differ");
    }
    return triplet_loss_rows(stack_vectors(anchors, "triplet_loss"),
                             stack_vectors(positives, "triplet_loss"),
                             stack_vectors(negatives, "triplet_loss"), rho);
}

Tensor lmcl_loss_rows(const Tensor& features, std::span<const int> labels, const Tensor& weights,
                      double s, double m, LmclForm form) {
    if (features.rank() != 2 || weights.rank() != 2) {
        throw DimensionError("lmcl_loss: features and weights must be rank-2");
    }
    const std::size_t n = features.shape()[0];
    const std::size_t e = features.shape()[1];
    const std::size_t classes = weights.shape()[0];
    if (n == 0) throw ContractError("lmcl_loss: empty batch");
    if (weights.shape()[1] != e) {
        throw DimensionError("lmcl_loss: feature dim " + std::to_string(e) +
                             " does not match weight dim " + std::to_string(weights.shape()[1]));
    }
    if (labels.size() != n) throw ContractError("lmcl_loss: label count does not match batch");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw ContractError("lmcl_loss: label " + std::to_string(labels[i]) +
                                " out of range [0, " + std::to_string(classes) + ")");
        }
    }
    check_unit_rows(features, "lmcl_loss features");
    check_unit_rows(weights, "lmcl_loss weights");

    Tensor cosines = matmul(features, transpose(weights));  // {n, C}

    // Margin enters only the target logit; both forms reduce to subtracting a
    // one-hot constant from the scaled cosines.
    const double margin = (form == LmclForm::paper) ? m : s * m;
    std::vector<double> onehot(n * classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        onehot[i * classes + static_cast<std::size_t>(labels[i])] = margin;
    }
    Tensor adjusted = sub(scale(cosines, s), Tensor::from_data({n, classes}, std::move(onehot)));

    std::vector<double> pick(n * classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        pick[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    Tensor target_logits = reduce_sum(mul(adjusted, Tensor::from_data({n, classes}, std::move(pick))),
                                      {1});  // {n}
    return reduce_mean(sub(log_sum_exp_rows(adjusted), target_logits));
}

Tensor lmcl_loss(std::span<const Tensor> features, std::span<const int> labels,
                 const Tensor& weights, double s, double m, LmclForm form) {
    return lmcl_loss_rows(stack_vectors(features, "lmcl_loss"), labels, weights, s, m, form);
}

}  // namespace cdml
