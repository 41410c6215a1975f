#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdml/tensor.hpp"

namespace cdml {

/// Spatial feature tensor f_r(I) of shape H x W x D. Flattening yields the
/// H*W position vectors in R^D used throughout the pairwise-difference space.
struct FeatureMap {
    Tensor map;  // rank-3, shape {H, W, D}

    FeatureMap() = default;
    explicit FeatureMap(Tensor t);

    std::size_t height() const { return map.shape()[0]; }
    std::size_t width() const { return map.shape()[1]; }
    std::size_t depth() const { return map.shape()[2]; }
    std::size_t positions() const { return height() * width(); }

    /// View as {H*W, D}: one row per spatial position.
    Tensor flatten() const;
    /// Inverse of flatten.
    static FeatureMap unflatten(const Tensor& rows, std::size_t h, std::size_t w);
};

enum class Polarity { positive, negative };

std::string polarity_name(Polarity p);

/// Second-order summary of a domain's pairwise-difference distribution:
/// the regularized covariance (Eq.-style unbiased estimate plus a trace-scaled
/// ridge) and mean of the difference vectors, with the sample count N = B*H*W.
struct PairCovariance {
    Tensor sigma;   // {d, d}, symmetric, eigenvalues >= epsilon
    Tensor mean;    // {d}
    std::size_t sample_count = 0;
    Polarity polarity = Polarity::positive;
    double epsilon = 0.0;  // ridge actually added

    std::size_t dim() const { return sigma.shape()[0]; }

    std::string to_json_string() const;
    static PairCovariance from_json_string(const std::string& text);
};

struct CovarianceOptions {
    /// Keep sigma/mean attached to the autodiff graph of the inputs. Default
    /// detaches them: the metric is treated as a constant downstream.
    bool connect_graph = false;
};

/// Element-wise difference of equal-shape feature maps (R = f_r(a) - f_r(b)).
FeatureMap difference_tensor(const FeatureMap& a, const FeatureMap& b);

/// Unbiased covariance and mean over all N = B*H*W difference vectors of the
/// given pairs, regularized with eps*I where eps = 1e-4*trace/d floored at
/// 1e-6. Throws InsufficientSamplesError when N < 2.
PairCovariance estimate_covariance(std::span<const std::pair<FeatureMap, FeatureMap>> pairs,
                                   Polarity polarity, const CovarianceOptions& opts = {});

/// Same estimator over an already-assembled {N, d} matrix of differences.
PairCovariance estimate_covariance_from_diffs(const Tensor& diffs, Polarity polarity,
                                              const CovarianceOptions& opts = {});

/// Squared Mahalanobis distance (x-y)^T Sigma (x-y); differentiable w.r.t.
/// x and y, with the metric as built (constant unless connect_graph was set).
Tensor mahalanobis_sq(const Tensor& x, const Tensor& y, const PairCovariance& metric);

/// Row-wise quadratic forms r^T Sigma r for a {n, d} matrix of vectors.
Tensor mahalanobis_sq_rows(const Tensor& rows, const PairCovariance& metric);

/// Mean of r^T Sigma r over the list; diagnostic, value only.
double alignment_energy(std::span<const std::vector<double>> diffs, const PairCovariance& metric);

}  // namespace cdml
