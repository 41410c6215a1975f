#pragma once

#include <span>
#include <vector>

#include "cdml/metrics.hpp"
#include "cdml/tensor.hpp"

namespace cdml {

/// Margins and scale shared by the three training signals.
struct LossConfig {
    double tau = 1.0;   // cross-domain triplet margin
    double rho = 1.0;   // triplet margin
    double m = 0.5;     // classifier margin
    double s = 16.0;    // classifier cosine scale

    void validate() const;
};

/// Which exponent carries the classifier margin: `paper` subtracts m after
/// scaling (s*cos - m), `cosface` scales the margined cosine (s*(cos - m)).
enum class LmclForm { paper, cosface };

/// B feature-map triples from one domain, all under the current theta_r.
struct TripletFeatureMaps {
    std::vector<FeatureMap> anchors;
    std::vector<FeatureMap> positives;
    std::vector<FeatureMap> negatives;

    std::size_t size() const { return anchors.size(); }
};

/// Cross-domain triplet loss: per triplet, position-averaged squared
/// Mahalanobis distances under sigma_pos (anchor-positive) and sigma_neg
/// (anchor-negative) enter a hinge with margin tau; the batch is averaged.
/// The covariances come from a different domain than the triplets.
Tensor cdt_loss(const TripletFeatureMaps& triplets, const PairCovariance& sigma_pos,
                const PairCovariance& sigma_neg, double tau);

/// Batched core of cdt_loss over stacked position rows ({B*HW, D} each,
/// sample-major). Exposed for callers that already hold batched activations.
Tensor cdt_loss_rows(const Tensor& anchor_rows, const Tensor& positive_rows,
                     const Tensor& negative_rows, std::size_t batch,
                     const PairCovariance& sigma_pos, const PairCovariance& sigma_neg, double tau);

/// Standard triplet loss over l2-normalized embeddings (enforced within 1e-6).
Tensor triplet_loss(std::span<const Tensor> anchors, std::span<const Tensor> positives,
                    std::span<const Tensor> negatives, double rho);

/// Matrix form: rows of {B, e} matrices are the embeddings.
Tensor triplet_loss_rows(const Tensor& anchors, const Tensor& positives, const Tensor& negatives,
                         double rho);

/// Large margin cosine loss over l2-normalized features and weight rows
/// (both enforced within 1e-6). Labels index rows of `weights`.
Tensor lmcl_loss(std::span<const Tensor> features, std::span<const int> labels,
                 const Tensor& weights, double s, double m, LmclForm form = LmclForm::paper);

/// Matrix form: rows of the {n, e} feature matrix are the samples.
Tensor lmcl_loss_rows(const Tensor& features, std::span<const int> labels, const Tensor& weights,
                      double s, double m, LmclForm form = LmclForm::paper);

}  // namespace cdml
