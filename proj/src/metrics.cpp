#include "cdml/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cdml/errors.hpp"

namespace cdml {

FeatureMap::FeatureMap(Tensor t) : map(std::move(t)) {
    if (map.rank() != 3) {
        throw DimensionError("FeatureMap: expected rank-3 tensor, got " +
                             shape_to_string(map.shape()));
    }
    if (map.numel() == 0) throw ContractError("FeatureMap: empty map");
}

Tensor FeatureMap::flatten() const { return reshape(map, {positions(), depth()}); }

FeatureMap FeatureMap::unflatten(const Tensor& rows, std::size_t h, std::size_t w) {
    if (rows.rank() != 2 || rows.shape()[0] != h * w) {
        throw DimensionError("unflatten: rows " + shape_to_string(rows.shape()) +
                             " do not fit " + std::to_string(h) + "x" + std::to_string(w));
    }
    return FeatureMap(reshape(rows, {h, w, rows.shape()[1]}));
}

std::string polarity_name(Polarity p) {
    return p == Polarity::positive ? "positive" : "negative";
}

FeatureMap difference_tensor(const FeatureMap& a, const FeatureMap& b) {
    if (a.map.shape() != b.map.shape()) {
        throw DimensionError("difference_tensor: shape mismatch " +
                             shape_to_string(a.map.shape()) + " vs " +
                             shape_to_string(b.map.shape()));
    }
    return FeatureMap(sub(a.map, b.map));
}

PairCovariance estimate_covariance_from_diffs(const Tensor& diffs, Polarity polarity,
                                              const CovarianceOptions& opts) {
    if (diffs.rank() != 2) {
        throw DimensionError("estimate_covariance: expected {N, d} differences, got " +
                             shape_to_string(diffs.shape()));
    }
    const std::size_t n = diffs.shape()[0];
    const std::size_t d = diffs.shape()[1];
    if (n < 2) {
        throw InsufficientSamplesError("estimate_covariance: need N >= 2 difference vectors, got " +
                                       std::to_string(n));
    }

    Tensor mean = reduce_mean(diffs, {0});                       // {d}
    Tensor centered = sub(diffs, expand(mean, diffs.shape(), {0}));
    Tensor empirical = scale(matmul(transpose(centered), centered),
                             1.0 / static_cast<double>(n - 1));  // {d, d}

    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += empirical.data()[i * d + i];
    const double eps = std::max(1e-6, 1e-4 * trace / static_cast<double>(d));

    Tensor sigma = add(empirical, scale(Tensor::eye(d), eps));

    PairCovariance cov;
    cov.sigma = opts.connect_graph ? sigma : sigma.detach();
    cov.mean = opts.connect_graph ? mean : mean.detach();
    cov.sample_count = n;
    cov.polarity = polarity;
    cov.epsilon = eps;
    return cov;
}

PairCovariance estimate_covariance(std::span<const std::pair<FeatureMap, FeatureMap>> pairs,
                                   Polarity polarity, const CovarianceOptions& opts) {
    if (pairs.empty()) {
        throw InsufficientSamplesError("estimate_covariance: no pairs");
    }
    std::vector<Tensor> parts;
    parts.reserve(pairs.size());
    for (const auto& [a, b] : pairs) {
        parts.push_back(difference_tensor(a, b).flatten());
    }
    return estimate_covariance_from_diffs(concat_rows(parts), polarity, opts);
}

Tensor mahalanobis_sq_rows(const Tensor& rows, const PairCovariance& metric) {
    if (rows.rank() != 2 || rows.shape()[1] != metric.dim()) {
        throw DimensionError("mahalanobis_sq: vectors " + shape_to_string(rows.shape()) +
                             " incompatible with metric dim " + std::to_string(metric.dim()));
    }
    return reduce_sum(mul(matmul(rows, metric.sigma), rows), {1});
}

Tensor mahalanobis_sq(const Tensor& x, const Tensor& y, const PairCovariance& metric) {
    if (x.rank() != 1 || y.rank() != 1 || x.shape() != y.shape()) {
        throw DimensionError("mahalanobis_sq: expected equal rank-1 vectors, got " +
                             shape_to_string(x.shape()) + " and " + shape_to_string(y.shape()));
    }
    if (x.shape()[0] != metric.dim()) {
        throw DimensionError("mahalanobis_sq: vector dim " + std::to_string(x.shape()[0]) +
                             " does not match metric dim " + std::to_string(metric.dim()));
    }
    Tensor diff = reshape(sub(x, y), {1, x.shape()[0]});
    return reshape(mahalanobis_sq_rows(diff, metric), {});
}

double alignment_energy(std::span<const std::vector<double>> diffs,
                        const PairCovariance& metric) {
    if (diffs.empty()) throw ContractError("alignment_energy: empty input");
    const std::size_t d = metric.dim();
    const auto& sigma = metric.sigma.data();
    double total = 0.0;
    for (const auto& r : diffs) {
        if (r.size() != d) {
            throw DimensionError("alignment_energy: vector dim " + std::to_string(r.size()) +
                                 " does not match metric dim " + std::to_string(d));
        }
        double q = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < d; ++j) row += sigma[i * d + j] * r[j];
            q += r[i] * row;
        }
        total += q;
    }
    return total / static_cast<double>(diffs.size());
}

std::string PairCovariance::to_json_string() const {
    nlohmann::json j;
    j["polarity"] = polarity_name(polarity);
    j["d"] = dim();
    j["sigma"] = sigma.data();
    j["mean"] = mean.data();
    j["sample_count"] = sample_count;
    return j.dump();
}

PairCovariance PairCovariance::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("PairCovariance: ") + e.what());
    }
    PairCovariance cov;
    const std::size_t d = j.at("d").get<std::size_t>();
    cov.sigma = Tensor::from_data({d, d}, j.at("sigma").get<std::vector<double>>());
    cov.mean = Tensor::from_data({d}, j.at("mean").get<std::vector<double>>());
    cov.sample_count = j.at("sample_count").get<std::size_t>();
    cov.polarity =
        j.at("polarity").get<std::string>() == "negative" ? Polarity::negative : Polarity::positive;
    return cov;
}

}  // namespace cdml
