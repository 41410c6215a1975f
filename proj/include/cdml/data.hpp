#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdml/rng.hpp"

namespace cdml {

struct Sample {
    std::vector<double> x;
    int identity = 0;
};

/// One data source with its own distribution. Identity labels are globally
/// unique across domains.
struct DomainDataset {
    int domain_id = 0;
    std::vector<Sample> samples;
    // identity -> indices into samples, ordered for determinism
    std::map<int, std::vector<std::size_t>> identity_index;

    void rebuild_index();
    std::size_t num_identities() const { return identity_index.size(); }
};

struct TripletEntry {
    std::vector<double> anchor;
    std::vector<double> positive;
    std::vector<double> negative;
    int anchor_identity = 0;
    int negative_identity = 0;
    std::size_t anchor_index = 0;
    // -1 marks an augmented positive (single-sample identity)
    long positive_index = -1;
    std::size_t negative_index = 0;
};

struct TripletBatch {
    int domain_id = 0;
    std::vector<TripletEntry> entries;

    std::size_t size() const { return entries.size(); }
};

/// Per-domain affine distortion x -> R * diag(s) * x + t.
struct DomainTransform {
    std::vector<double> rotation;     // d x d row-major orthogonal
    std::vector<double> scale_diag;   // d
    std::vector<double> translation;  // d

    std::vector<double> apply(const std::vector<double>& v) const;
    static DomainTransform identity(std::size_t dim);
    static DomainTransform random(std::size_t dim, bool rotate, double scale_min, double scale_max,
                                  double translation_sigma, Rng& rng);
};

struct TransformSpec {
    bool rotate = true;
    double scale_min = 0.5;
    double scale_max = 2.0;
    double translation_sigma = 1.0;
};

struct SynthConfig {
    std::size_t num_domains = 3;
    std::size_t identities_per_domain = 20;
    std::size_t samples_per_identity = 10;
    std::size_t input_dim = 24;
    double prototype_scale = 1.0;
    double sigma_id = 0.6;  // within-identity noise
    TransformSpec transform;
    // Overrides the random per-domain transforms when non-empty; must then
    // hold exactly num_domains entries.
    std::vector<DomainTransform> explicit_transforms;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Synthetic multi-domain identity data: prototypes are shared per identity
/// family, every domain applies its own affine distortion, labels are
/// globally disjoint. Pure function of the config (seed included).
std::vector<DomainDataset> generate(const SynthConfig& cfg);

struct AugmentOptions {
    // < 0 selects the default 0.05 * ||x|| / sqrt(dim)
    double sigma = -1.0;
    // occlusion span length is drawn from [0, max_span_fraction * dim]
    double max_span_fraction = 0.25;
};

/// Feature-space positive-pair augmentation: additive Gaussian noise plus a
/// zeroed contiguous coordinate span.
std::vector<double> augment(const std::vector<double>& x, Rng& rng,
                            const AugmentOptions& opts = {});
/// Deterministic core: noise then zero [span_begin, span_end).
std::vector<double> augment_with_span(const std::vector<double>& x, double sigma,
                                      std::size_t span_begin, std::size_t span_end, Rng& rng);

/// Class-balanced triplet sampling: B distinct identities drawn without
/// replacement; anchor/positive are distinct samples (augmented positive when
/// the identity has a single sample); negative comes from another identity.
TripletBatch sample_triplets(const DomainDataset& ds, std::size_t batch, Rng& rng);

enum class DatasetFormat { text, binary };

void store_datasets(const std::vector<DomainDataset>& domains, const std::string& path,
                    DatasetFormat format = DatasetFormat::text);
std::vector<DomainDataset> load_datasets(const std::string& path);

/// Asserts the cross-domain invariants (disjoint identities, nonempty ids).
void validate_datasets(const std::vector<DomainDataset>& domains);

}  // namespace cdml
