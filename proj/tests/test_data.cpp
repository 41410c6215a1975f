#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "cdml/data.hpp"
#include "cdml/errors.hpp"
#include "cdml/rng.hpp"

using namespace cdml;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<double> pooled_covariance(const DomainDataset& ds) {
    const std::size_t d = ds.samples.front().x.size();
    std::vector<double> mean(d, 0.0);
    for (const auto& s : ds.samples)
        for (std::size_t i = 0; i < d; ++i) mean[i] += s.x[i];
    for (auto& v : mean) v /= static_cast<double>(ds.samples.size());
    std::vector<double> cov(d * d, 0.0);
    for (const auto& s : ds.samples) {
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                cov[i * d + j] += (s.x[i] - mean[i]) * (s.x[j] - mean[j]);
    }
    for (auto& v : cov) v /= static_cast<double>(ds.samples.size() - 1);
    return cov;
}

}  // namespace

TEST_CASE("generate with zero noise and identity transform collapses identities") {
    SynthConfig cfg;
    cfg.num_domains = 2;
    cfg.identities_per_domain = 3;
    cfg.samples_per_identity = 4;
    cfg.input_dim = 5;
    cfg.sigma_id = 0.0;
    cfg.explicit_transforms = {DomainTransform::identity(5), DomainTransform::identity(5)};
    auto domains = generate(cfg);
    REQUIRE(domains.size() == 2);
    for (const auto& ds : domains) {
        for (const auto& [id, idxs] : ds.identity_index) {
            for (std::size_t i = 1; i < idxs.size(); ++i) {
                CHECK(ds.samples[idxs[i]].x == ds.samples[idxs[0]].x);
            }
        }
    }
    // Identity transforms and shared prototypes: both domains coincide.
    for (std::size_t i = 0; i < domains[0].samples.size(); ++i) {
        CHECK(domains[0].samples[i].x == domains[1].samples[i].x);
    }
}

TEST_CASE("generate is a pure function of the config") {
    SynthConfig cfg;
    cfg.seed = 77;
    auto a = generate(cfg);
    auto b = generate(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t d = 0; d < a.size(); ++d) {
        REQUIRE(a[d].samples.size() == b[d].samples.size());
        for (std::size_t i = 0; i < a[d].samples.size(); ++i) {
            CHECK(a[d].samples[i].x == b[d].samples[i].x);
            CHECK(a[d].samples[i].identity == b[d].samples[i].identity);
        }
    }
}

TEST_CASE("identity labels are globally disjoint") {
    SynthConfig cfg;
    cfg.num_domains = 4;
    auto domains = generate(cfg);
    std::set<int> all;
    for (const auto& ds : domains) {
        for (const auto& [id, idxs] : ds.identity_index) {
            CHECK(all.insert(id).second);
        }
    }
    CHECK(all.size() == cfg.num_domains * cfg.identities_per_domain);
}

TEST_CASE("a fixed rotation between domains conjugates the pooled covariance") {
    const std::size_t dim = 4;
    DomainTransform t0 = DomainTransform::identity(dim);
    t0.scale_diag = {3.0, 1.0, 0.5, 1.5};
    DomainTransform t1 = t0;
    // Rotation by 30 degrees in the (0, 1) plane.
    const double c = std::cos(0.5235987755982988), s = std::sin(0.5235987755982988);
    t1.rotation[0 * dim + 0] = c;
    t1.rotation[0 * dim + 1] = -s;
    t1.rotation[1 * dim + 0] = s;
    t1.rotation[1 * dim + 1] = c;

    SynthConfig cfg;
    cfg.num_domains = 2;
    cfg.identities_per_domain = 50;
    cfg.samples_per_identity = 20;
    cfg.input_dim = dim;
    cfg.sigma_id = 0.5;
    cfg.explicit_transforms = {t0, t1};
    cfg.seed = 99;
    auto domains = generate(cfg);

    auto cov0 = pooled_covariance(domains[0]);
    auto cov1 = pooled_covariance(domains[1]);
    // R cov0 R^T entrywise.
    auto rot = [&](std::size_t i, std::size_t j) { return t1.rotation[i * dim + j]; };
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            double want = 0.0;
            for (std::size_t p = 0; p < dim; ++p)
                for (std::size_t q = 0; q < dim; ++q)
                    want += rot(i, p) * cov0[p * dim + q] * rot(j, q);
            CHECK(std::abs(cov1[i * dim + j] - want) < 0.6);
        }
    }
}

TEST_CASE("augment basics") {
    Rng rng(1);
    std::vector<double> x{1, 2, 3, 4, 5, 6};

    auto same = augment_with_span(x, 0.0, 0, 0, rng);
    CHECK(same == x);

    auto occluded = augment_with_span(x, 0.0, 2, 5, rng);
    CHECK(occluded[0] == 1);
    CHECK(occluded[1] == 2);
    CHECK(occluded[2] == 0);
    CHECK(occluded[3] == 0);
    CHECK(occluded[4] == 0);
    CHECK(occluded[5] == 6);

    // Default options perturb the vector on every draw.
    for (int rep = 0; rep < 50; ++rep) {
        CHECK(augment(x, rng) != x);
    }
}

TEST_CASE("sample_triplets is class balanced") {
    SynthConfig cfg;
    cfg.num_domains = 1;
    cfg.identities_per_domain = 6;
    cfg.samples_per_identity = 3;
    cfg.input_dim = 4;
    auto domains = generate(cfg);
    Rng rng(5);

    auto batch = sample_triplets(domains[0], 6, rng);
    std::set<int> anchors;
    for (const auto& e : batch.entries) {
        CHECK(anchors.insert(e.anchor_identity).second);  // every identity once
        CHECK(e.anchor_identity != e.negative_identity);
        if (e.positive_index >= 0) {
            CHECK(static_cast<std::size_t>(e.positive_index) != e.anchor_index);
        }
    }
    CHECK(anchors.size() == 6);

    CHECK_THROWS_WITH_AS(sample_triplets(domains[0], 7, rng), doctest::Contains("short by 1"),
                         ContractError);
}

TEST_CASE("single-sample identities get augmented positives") {
    DomainDataset ds;
    ds.domain_id = 0;
    ds.samples = {{{1, 2, 3, 4}, 0}, {{5, 6, 7, 8}, 1}};
    ds.rebuild_index();
    Rng rng(7);
    auto batch = sample_triplets(ds, 2, rng);
    for (const auto& e : batch.entries) {
        CHECK(e.positive_index == -1);
        CHECK(e.positive != e.anchor);  // augmented, not the anchor verbatim
    }
}

TEST_CASE("anchor identities are uniform over many batches") {
    SynthConfig cfg;
    cfg.num_domains = 1;
    cfg.identities_per_domain = 10;
    cfg.samples_per_identity = 2;
    cfg.input_dim = 3;
    auto domains = generate(cfg);
    Rng rng(11);

    const int reps = 10000;
    const std::size_t batch = 4;
    std::map<int, int> counts;
    for (int r = 0; r < reps; ++r) {
        auto b = sample_triplets(domains[0], batch, rng);
        for (const auto& e : b.entries) counts[e.anchor_identity]++;
    }
    const double p = static_cast<double>(batch) / 10.0;
    const double mean = reps * p;
    const double sigma = std::sqrt(reps * p * (1.0 - p));
    for (const auto& [id, count] : counts) {
        CHECK(std::abs(count - mean) < 3.0 * sigma);
    }
}

TEST_CASE("dataset store/load round-trips in both formats") {
    SynthConfig cfg;
    cfg.num_domains = 2;
    cfg.identities_per_domain = 3;
    cfg.samples_per_identity = 2;
    cfg.input_dim = 3;
    cfg.seed = 13;
    auto domains = generate(cfg);

    for (auto format : {DatasetFormat::text, DatasetFormat::binary}) {
        const std::string path = "/tmp/cdml_test_dataset";
        store_datasets(domains, path, format);
        auto loaded = load_datasets(path);
        REQUIRE(loaded.size() == domains.size());
        for (std::size_t d = 0; d < domains.size(); ++d) {
            CHECK(loaded[d].domain_id == domains[d].domain_id);
            REQUIRE(loaded[d].samples.size() == domains[d].samples.size());
            for (std::size_t i = 0; i < domains[d].samples.size(); ++i) {
                CHECK(loaded[d].samples[i].identity == domains[d].samples[i].identity);
                CHECK(loaded[d].samples[i].x == domains[d].samples[i].x);
            }
        }
        std::remove(path.c_str());
    }
}

TEST_CASE("same seed produces byte-identical dataset files") {
    SynthConfig cfg;
    cfg.seed = 23;
    store_datasets(generate(cfg), "/tmp/cdml_ds_a");
    store_datasets(generate(cfg), "/tmp/cdml_ds_b");
    CHECK(slurp("/tmp/cdml_ds_a") == slurp("/tmp/cdml_ds_b"));
    std::remove("/tmp/cdml_ds_a");
    std::remove("/tmp/cdml_ds_b");
}

TEST_CASE("empty domain list round-trips") {
    const std::string path = "/tmp/cdml_ds_empty";
    store_datasets({}, path);
    CHECK(load_datasets(path).empty());
    std::remove(path.c_str());
}

TEST_CASE("hand-written fixture parses to expected values") {
    const std::string path = "/tmp/cdml_ds_fixture";
    {
        std::ofstream out(path);
        out << "cdml-dataset,1,1,2\n";
        out << "3,7,0.5,-1.25\n";
        out << "3,8,2,4.5\n";
    }
    auto domains = load_datasets(path);
    REQUIRE(domains.size() == 1);
    CHECK(domains[0].domain_id == 3);
    REQUIRE(domains[0].samples.size() == 2);
    CHECK(domains[0].samples[0].identity == 7);
    CHECK(domains[0].samples[0].x == std::vector<double>{0.5, -1.25});
    CHECK(domains[0].samples[1].identity == 8);
    CHECK(domains[0].samples[1].x == std::vector<double>{2.0, 4.5});
    std::remove(path.c_str());
}

TEST_CASE("malformed files report the offending line") {
    const std::string path = "/tmp/cdml_ds_bad";
    {
        std::ofstream out(path);
        out << "cdml-dataset,1,1,2\n";
        out << "0,1,0.5\n";  // one value short
    }
    CHECK_THROWS_WITH_AS(load_datasets(path), doctest::Contains("line 2"), ParseError);
    {
        std::ofstream out(path);
        out << "cdml-dataset,1,2,2\n";
        out << "0,1,0.5,1.5\n";
    }
    CHECK_THROWS_AS(load_datasets(path), ParseError);  // domain count mismatch
    {
        std::ofstream out(path);
        out << "wrong-magic,1,0,2\n";
    }
    CHECK_THROWS_AS(load_datasets(path), ParseError);
    std::remove(path.c_str());
}
