#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cdml/errors.hpp"
#include "cdml/losses.hpp"
#include "cdml/metrics.hpp"
#include "cdml/rng.hpp"
#include "cdml/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace cdml;
using cdml::testing::finite_difference;
using cdml::testing::max_rel_error;

namespace {

PairCovariance identity_metric(std::size_t d) {
    PairCovariance cov;
    cov.sigma = Tensor::eye(d);
    cov.mean = Tensor::zeros({d});
    cov.sample_count = 2;
    return cov;
}

PairCovariance random_psd_metric(std::size_t d, Rng& rng) {
    std::vector<double> g(d * d);
    for (auto& v : g) v = rng.uniform(-1.0, 1.0);
    Tensor gt = Tensor::from_data({d, d}, g);
    PairCovariance cov;
    cov.sigma = add(matmul(transpose(gt), gt), scale(Tensor::eye(d), 0.05)).detach();
    cov.mean = Tensor::zeros({d});
    cov.sample_count = 2;
    return cov;
}

FeatureMap random_map(std::size_t h, std::size_t w, std::size_t d, Rng& rng,
                      bool requires_grad = false) {
    std::vector<double> data(h * w * d);
    for (auto& v : data) v = rng.uniform(-1.5, 1.5);
    return FeatureMap(Tensor::from_data({h, w, d}, std::move(data), requires_grad));
}

TripletFeatureMaps random_triplets(std::size_t b, std::size_t h, std::size_t w, std::size_t d,
                                   Rng& rng) {
    TripletFeatureMaps t;
    for (std::size_t i = 0; i < b; ++i) {
        t.anchors.push_back(random_map(h, w, d, rng));
        t.positives.push_back(random_map(h, w, d, rng));
        t.negatives.push_back(random_map(h, w, d, rng));
    }
    return t;
}

// Independent recomputation of the CDT value with explicit quadratic forms.
double cdt_loop_oracle(const TripletFeatureMaps& t, const PairCovariance& sp,
                       const PairCovariance& sn, double tau) {
    const std::size_t b = t.size();
    const std::size_t hw = t.anchors[0].positions();
    const std::size_t d = t.anchors[0].depth();
    auto quad = [&](const std::vector<double>& r, const PairCovariance& cov) {
        double q = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < d; ++j) row += cov.sigma.data()[i * d + j] * r[j];
            q += r[i] * row;
        }
        return q;
    };
    double total = 0.0;
    for (std::size_t bi = 0; bi < b; ++bi) {
        double dp = 0.0, dn = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            std::vector<double> rp(d), rn(d);
            for (std::size_t k = 0; k < d; ++k) {
                const std::size_t idx = p * d + k;
                rp[k] = t.anchors[bi].map.data()[idx] - t.positives[bi].map.data()[idx];
                rn[k] = t.anchors[bi].map.data()[idx] - t.negatives[bi].map.data()[idx];
            }
            dp += quad(rp, sp);
            dn += quad(rn, sn);
        }
        dp /= static_cast<double>(hw);
        dn /= static_cast<double>(hw);
        total += std::max(0.0, dp - dn + tau);
    }
    return total / static_cast<double>(b);
}

Tensor random_unit(std::size_t d, Rng& rng) {
    return l2_normalize(Tensor::from_data({d}, rng.gaussian_vector(d))).detach();
}

}  // namespace

TEST_CASE("LossConfig validation") {
    LossConfig ok;
    CHECK_NOTHROW(ok.validate());
    LossConfig bad = ok;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = ok;
    bad.m = 1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("cdt hinge is inactive when the negative energy exceeds tau") {
    Rng rng(1);
    TripletFeatureMaps t;
    FeatureMap a = random_map(1, 1, 2, rng);
    t.anchors.push_back(a);
    t.positives.push_back(a);  // d+ = 0
    t.negatives.push_back(FeatureMap(Tensor::from_data(
        {1, 1, 2}, {a.map.data()[0] + 3.0, a.map.data()[1]})));  // d- = 9 under I
    auto id = identity_metric(2);
    CHECK(cdt_loss(t, id, id, 1.0).value() == 0.0);
    // With tau above the negative energy the hinge re-activates.
    CHECK(cdt_loss(t, id, id, 10.0).value() == doctest::Approx(1.0));
}

TEST_CASE("cdt hand computation at a single position") {
    TripletFeatureMaps t;
    t.anchors.push_back(FeatureMap(Tensor::from_data({1, 1, 2}, {0.0, 0.0})));
    t.positives.push_back(FeatureMap(Tensor::from_data({1, 1, 2}, {0.2, 0.0})));
    t.negatives.push_back(FeatureMap(Tensor::from_data({1, 1, 2}, {0.9, 0.0})));
    auto id = identity_metric(2);
    CHECK(cdt_loss(t, id, id, 1.0).value() == doctest::Approx(0.23).epsilon(1e-12));
}

TEST_CASE("cdt matches the loop-nest oracle on random batches") {
    Rng rng(42);
    for (int rep = 0; rep < 10; ++rep) {
        auto t = random_triplets(3, 2, 2, 4, rng);
        auto sp = random_psd_metric(4, rng);
        auto sn = random_psd_metric(4, rng);
        const double got = cdt_loss(t, sp, sn, 1.0).value();
        const double want = cdt_loop_oracle(t, sp, sn, 1.0);
        CHECK(std::abs(got - want) < 1e-10);
        CHECK(got >= 0.0);
    }
}

TEST_CASE("cdt rejects mismatched covariance dimension and empty batches") {
    Rng rng(7);
    auto t = random_triplets(2, 1, 1, 3, rng);
    auto wrong = identity_metric(4);
    CHECK_THROWS_AS(cdt_loss(t, wrong, wrong, 1.0), DimensionError);
    TripletFeatureMaps empty;
    auto id3 = identity_metric(3);
    CHECK_THROWS_AS(cdt_loss(empty, id3, id3, 1.0), ContractError);
}

TEST_CASE("cdt gradient w.r.t. anchors matches finite differences") {
    Rng rng(1234);
    TripletFeatureMaps t;
    t.anchors.push_back(random_map(2, 1, 3, rng, true));
    t.positives.push_back(random_map(2, 1, 3, rng));
    t.negatives.push_back(random_map(2, 1, 3, rng));
    auto sp = random_psd_metric(3, rng);
    auto sn = random_psd_metric(3, rng);
    // Keep the hinge active so the point is differentiable.
    const double tau = 5.0;
    auto f = [&] { return cdt_loss(t, sp, sn, tau).value(); };
    backward(cdt_loss(t, sp, sn, tau));
    CHECK(max_rel_error(t.anchors[0].map.grad(), finite_difference(f, t.anchors[0].map)) < 1e-4);
}

TEST_CASE("cdt with identity metrics degenerates to plain triplet on averaged distances") {
    Rng rng(9);
    for (int rep = 0; rep < 10; ++rep) {
        auto t = random_triplets(4, 2, 2, 3, rng);
        auto id = identity_metric(3);
        const double got = cdt_loss(t, id, id, 1.0).value();

        double want = 0.0;
        const std::size_t hw = 4, d = 3;
        for (std::size_t b = 0; b < 4; ++b) {
            double dp = 0.0, dn = 0.0;
            for (std::size_t i = 0; i < hw * d; ++i) {
                const double ep = t.anchors[b].map.data()[i] - t.positives[b].map.data()[i];
                const double en = t.anchors[b].map.data()[i] - t.negatives[b].map.data()[i];
                dp += ep * ep;
                dn += en * en;
            }
            want += std::max(0.0, dp / hw - dn / hw + 1.0);
        }
        want /= 4.0;
        CHECK(std::abs(got - want) < 1e-10);
    }
}

TEST_CASE("scaling both covariances scales the pre-hinge distance gap linearly") {
    Rng rng(21);
    TripletFeatureMaps t;
    // Positives far, negatives near the anchor: the hinge stays active.
    for (int i = 0; i < 3; ++i) {
        FeatureMap a = random_map(1, 2, 3, rng);
        std::vector<double> far(a.map.data()), near(a.map.data());
        for (auto& v : far) v += 2.0;
        for (auto& v : near) v += 0.01;
        t.anchors.push_back(a);
        t.positives.push_back(FeatureMap(Tensor::from_data({1, 2, 3}, far)));
        t.negatives.push_back(FeatureMap(Tensor::from_data({1, 2, 3}, near)));
    }
    auto base = random_psd_metric(3, rng);
    const double tau = 1.0;
    for (double c : {2.0, 0.5, 7.0}) {
        PairCovariance scaled;
        scaled.sigma = scale(base.sigma, c).detach();
        scaled.mean = base.mean;
        scaled.sample_count = base.sample_count;
        const double l1 = cdt_loss(t, base, base, tau).value();
        const double lc = cdt_loss(t, scaled, scaled, tau).value();
        CHECK(std::abs((lc - tau) - c * (l1 - tau)) < 1e-10);
    }
}

TEST_CASE("triplet loss hand cases") {
    // a == p and an orthogonal negative: squared distance 2, hinge closed.
    Tensor a = Tensor::from_data({2}, {1, 0});
    Tensor n = Tensor::from_data({2}, {0, 1});
    std::vector<Tensor> av{a}, pv{a}, nv{n};
    CHECK(triplet_loss(av, pv, nv, 1.0).value() == 0.0);

    // d+^2 = 0.04, d-^2 = 0.81 on the unit circle -> 0.23.
    const double cp = 1.0 - 0.04 / 2.0, cn = 1.0 - 0.81 / 2.0;
    Tensor p2 = Tensor::from_data({2}, {cp, std::sqrt(1 - cp * cp)});
    Tensor n2 = Tensor::from_data({2}, {cn, std::sqrt(1 - cn * cn)});
    std::vector<Tensor> av2{a}, pv2{p2}, nv2{n2};
    CHECK(triplet_loss(av2, pv2, nv2, 1.0).value() == doctest::Approx(0.23).epsilon(1e-12));
}

TEST_CASE("triplet loss equals the per-triplet hinge mean") {
    Rng rng(5);
    std::vector<Tensor> a, p, n;
    for (int i = 0; i < 3; ++i) {
        a.push_back(random_unit(4, rng));
        p.push_back(random_unit(4, rng));
        n.push_back(random_unit(4, rng));
    }
    double want = 0.0;
    for (int i = 0; i < 3; ++i) {
        double dp = 0.0, dn = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            dp += (a[i].data()[k] - p[i].data()[k]) * (a[i].data()[k] - p[i].data()[k]);
            dn += (a[i].data()[k] - n[i].data()[k]) * (a[i].data()[k] - n[i].data()[k]);
        }
        want += std::max(0.0, dp - dn + 1.0);
    }
    want /= 3.0;
    CHECK(triplet_loss(a, p, n, 1.0).value() == doctest::Approx(want).epsilon(1e-12));
    CHECK(triplet_loss(a, p, n, 1.0).value() >= 0.0);
}

TEST_CASE("triplet loss rejects non-normalized embeddings") {
    Tensor bad = Tensor::from_data({2}, {2, 0});
    Tensor ok = Tensor::from_data({2}, {1, 0});
    std::vector<Tensor> av{bad}, pv{ok}, nv{ok};
    CHECK_THROWS_AS(triplet_loss(av, pv, nv, 1.0), ContractError);
}

TEST_CASE("triplet gradient flows through the normalization and matches finite differences") {
    Rng rng(17);
    Tensor raw_a = Tensor::from_data({4}, rng.gaussian_vector(4), true);
    Tensor raw_p = Tensor::from_data({4}, rng.gaussian_vector(4), true);
    Tensor raw_n = Tensor::from_data({4}, rng.gaussian_vector(4), true);
    auto build = [&] {
        std::vector<Tensor> a{l2_normalize(raw_a)}, p{l2_normalize(raw_p)}, n{l2_normalize(raw_n)};
        return triplet_loss(a, p, n, 1.5);
    };
    backward(build());
    auto f = [&] { return build().value(); };
    CHECK(max_rel_error(raw_a.grad(), finite_difference(f, raw_a)) < 1e-4);
    CHECK(max_rel_error(raw_p.grad(), finite_difference(f, raw_p)) < 1e-4);
    CHECK(max_rel_error(raw_n.grad(), finite_difference(f, raw_n)) < 1e-4);
}

TEST_CASE("lmcl hand softmax with aligned feature") {
    Tensor f = Tensor::from_data({2}, {1, 0});
    Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    std::vector<Tensor> fv{f};
    std::vector<int> labels{0};
    const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(lmcl_loss(fv, labels, w, 1.0, 0.0).value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("lmcl with m = 0 reduces to softmax cross-entropy and both forms agree") {
    Rng rng(3);
    Tensor w = l2_normalize_rows(Tensor::from_data({3, 4}, rng.gaussian_vector(12))).detach();
    std::vector<Tensor> feats;
    std::vector<int> labels{0, 2, 1, 0};
    for (int i = 0; i < 4; ++i) feats.push_back(random_unit(4, rng));

    const double paper = lmcl_loss(feats, labels, w, 8.0, 0.0, LmclForm::paper).value();
    const double cosface = lmcl_loss(feats, labels, w, 8.0, 0.0, LmclForm::cosface).value();
    CHECK(paper == doctest::Approx(cosface).epsilon(1e-14));

    // Naive softmax cross-entropy over the scaled cosines.
    double want = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        std::vector<double> logits(3, 0.0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t k = 0; k < 4; ++k)
                logits[c] += 8.0 * feats[i].data()[k] * w.data()[c * 4 + k];
        double denom = 0.0;
        for (double l : logits) denom += std::exp(l);
        want += -std::log(std::exp(logits[static_cast<std::size_t>(labels[i])]) / denom);
    }
    want /= static_cast<double>(feats.size());
    CHECK(paper == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("lmcl matches a per-sample log-sum-exp recomputation") {
    Rng rng(29);
    Tensor w = l2_normalize_rows(Tensor::from_data({4, 5}, rng.gaussian_vector(20))).detach();
    std::vector<Tensor> feats;
    std::vector<int> labels{1, 3, 0, 2, 1, 0};
    for (std::size_t i = 0; i < labels.size(); ++i) feats.push_back(random_unit(5, rng));

    for (LmclForm form : {LmclForm::paper, LmclForm::cosface}) {
        const double s = 12.0, m = 0.35;
        double want = 0.0;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            std::vector<double> logits(4, 0.0);
            for (std::size_t c = 0; c < 4; ++c)
                for (std::size_t k = 0; k < 5; ++k)
                    logits[c] += s * feats[i].data()[k] * w.data()[c * 5 + k];
            const auto target = static_cast<std::size_t>(labels[i]);
            logits[target] -= (form == LmclForm::paper) ? m : s * m;
            double denom = 0.0;
            for (double l : logits) denom += std::exp(l);
            want += -(logits[target] - std::log(denom));
        }
        want /= static_cast<double>(feats.size());
        const double got = lmcl_loss(feats, labels, w, s, m, form).value();
        CHECK(std::abs(got - want) < 1e-10);
        CHECK(got >= 0.0);
    }
}

TEST_CASE("lmcl decreases as the target cosine increases") {
    Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    std::vector<int> labels{0};
    double prev = 1e100;
    for (double cosv : {-0.8, -0.3, 0.0, 0.5, 0.95}) {
        Tensor f = Tensor::from_data({2}, {cosv, std::sqrt(1 - cosv * cosv)});
        std::vector<Tensor> fv{f};
        const double loss = lmcl_loss(fv, labels, w, 8.0, 0.3).value();
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("lmcl rejects bad labels and non-normalized inputs") {
    Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    std::vector<Tensor> fv{Tensor::from_data({2}, {1, 0})};
    std::vector<int> bad_label{2};
    CHECK_THROWS_AS(lmcl_loss(fv, bad_label, w, 1.0, 0.0), ContractError);

    std::vector<Tensor> bad_feat{Tensor::from_data({2}, {2, 0})};
    std::vector<int> labels{0};
    CHECK_THROWS_AS(lmcl_loss(bad_feat, labels, w, 1.0, 0.0), ContractError);

    Tensor bad_w = Tensor::from_data({2, 2}, {3, 0, 0, 1});
    CHECK_THROWS_AS(lmcl_loss(fv, labels, bad_w, 1.0, 0.0), ContractError);
}

TEST_CASE("lmcl gradient matches finite differences through the normalization") {
    Rng rng(71);
    Tensor raw_f = Tensor::from_data({2, 4}, rng.gaussian_vector(8), true);
    Tensor raw_w = Tensor::from_data({3, 4}, rng.gaussian_vector(12), true);
    std::vector<int> labels{2, 0};
    auto build = [&] {
        return lmcl_loss_rows(l2_normalize_rows(raw_f), labels, l2_normalize_rows(raw_w), 10.0,
                              0.4, LmclForm::paper);
    };
    backward(build());
    auto f = [&] { return build().value(); };
    CHECK(max_rel_error(raw_f.grad(), finite_difference(f, raw_f)) < 1e-4);
    CHECK(max_rel_error(raw_w.grad(), finite_difference(f, raw_w)) < 1e-4);
}
