#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdml/data.hpp"
#include "cdml/model.hpp"

namespace cdml {

struct ScoredPair {
    double score = 0.0;  // cosine similarity; higher means more alike
    bool same = false;
};

struct RocPoint {
    double threshold = 0.0;
    double far = 0.0;
    double tar = 0.0;
};

/// Threshold sweep over the distinct scores (accept when score >= threshold),
/// with a virtual +inf threshold pinning (FAR 0, TAR 0).
struct RocCurve {
    std::vector<RocPoint> points;  // descending thresholds
    double auc = 0.0;

    /// Conservative operating point: the best TAR among thresholds whose FAR
    /// stays strictly below the requested level, so a threshold sitting
    /// exactly on the level resolves to the higher-threshold (lower FAR) side.
    double tar_at(double far_level) const;
};

RocCurve roc(std::span<const ScoredPair> scored);

std::string roc_to_csv(const RocCurve& curve);

struct VerificationResult {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_split;
};

/// LFW-style protocol: for each of the 10 splits, the accuracy-maximizing
/// threshold is chosen on the other 9 and applied to the held split.
VerificationResult verification_accuracy_10split(
    const std::vector<std::vector<ScoredPair>>& splits);

struct EmbeddedSample {
    std::vector<double> embedding;
    int identity = 0;
};

/// A (reference, query) pair counts as correct when no distractor is strictly
/// closer to the reference than the query (cosine distance).
double identification_accuracy(std::span<const EmbeddedSample> references,
                               std::span<const EmbeddedSample> queries,
                               std::span<const EmbeddedSample> distractors);

/// Fraction of probes whose most-similar gallery member (ties to the lowest
/// index) shares the probe identity.
double rank1(std::span<const EmbeddedSample> probes, std::span<const EmbeddedSample> gallery);

/// Final per-sample representation: the flattened representation-network
/// output. (Image pipelines often concatenate features of a mirrored copy;
/// that has no feature-space analogue here. This is the hook to extend if
/// inputs ever become images.)
std::vector<std::vector<double>> embed_gallery(const ModelParams& params,
                                               std::span<const Sample> samples);

struct EvalOptions {
    std::vector<double> far_levels{0.001, 0.01, 0.1};
    std::size_t num_splits = 10;
    std::size_t pairs_per_split = 90;  // positives and negatives each
    double identification_eval_fraction = 0.7;
    std::uint64_t seed = 1;
};

struct EvalReport {
    int held_out_domain = -1;
    std::vector<std::pair<double, double>> tar_at_far;  // (far level, tar)
    double rank1 = 0.0;
    double auc = 0.0;
    double verification_mean = 0.0;
    double verification_std = 0.0;
    double identification_accuracy = 0.0;

    std::string to_json_string() const;
    static EvalReport from_json_string(const std::string& text);
};

/// Runs every protocol metric on one domain with the given parameters.
EvalReport evaluate_domain(const ModelParams& params, const DomainDataset& domain,
                           const EvalOptions& opts, RocCurve* curve_out = nullptr);

using TrainFn = std::function<ModelParams(const std::vector<DomainDataset>&)>;

/// Trains on every domain except held_out_id (via the injected trainer) and
/// evaluates all metrics on the held-out one. Needs at least three domains so
/// the trainer keeps a meta-train/meta-test split.
EvalReport leave_one_domain_out(const std::vector<DomainDataset>& all_domains, int held_out_id,
                                const TrainFn& train_fn, const EvalOptions& opts);

void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);

}  // namespace cdml
