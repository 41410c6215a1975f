#include "cdml/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cdml/errors.hpp"

namespace cdml {

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
    return 1.0 - cosine(a, b);
}

std::string format_level(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

RocCurve roc(std::span<const ScoredPair> scored) {
    std::size_t positives = 0, negatives = 0;
    for (const auto& p : scored) {
        if (!std::isfinite(p.score)) throw ContractError("roc: non-finite score");
        (p.same ? positives : negatives)++;
    }
    if (positives == 0 || negatives == 0) {
        throw ContractError("roc: need at least one positive and one negative pair");
    }

    std::vector<double> thresholds;
    thresholds.reserve(scored.size());
    for (const auto& p : scored) thresholds.push_back(p.score);
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    RocCurve curve;
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (const auto& p : scored) {
            if (p.score >= t) (p.same ? tp : fp)++;
        }
        curve.points.push_back({t, static_cast<double>(fp) / static_cast<double>(negatives),
                                static_cast<double>(tp) / static_cast<double>(positives)});
    }

    // Trapezoid over the staircase; vertical segments contribute zero width.
    double auc = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        auc += (b.far - a.far) * 0.5 * (a.tar + b.tar);
    }
    curve.auc = auc;
    return curve;
}

double RocCurve::tar_at(double far_level) const {
    double best = 0.0;
    for (const auto& p : points) {
        if (p.far < far_level) best = std::max(best, p.tar);
    }
    return best;
}

std::string roc_to_csv(const RocCurve& curve) {
    std::ostringstream out;
    out << "threshold,far,tar\n";
    for (const auto& p : curve.points) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.threshold, p.far, p.tar);
        out << buf;
    }
    return out.str();
}

VerificationResult verification_accuracy_10split(
    const std::vector<std::vector<ScoredPair>>& splits) {
    if (splits.size() != 10) {
        throw ContractError("verification: expected 10 splits, got " +
                            std::to_string(splits.size()));
    }
    for (std::size_t s = 0; s < splits.size(); ++s) {
        std::size_t pos = 0, neg = 0;
        for (const auto& p : splits[s]) (p.same ? pos : neg)++;
        if (pos == 0 || pos != neg) {
            throw ContractError("verification: split " + std::to_string(s) +
                                " must hold equally many positive and negative pairs");
        }
    }

    auto accuracy_at = [](const std::vector<const ScoredPair*>& pairs, double t) {
        std::size_t correct = 0;
        for (const auto* p : pairs) {
            const bool predicted_same = p->score >= t;
            if (predicted_same == p->same) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(pairs.size());
    };

    VerificationResult result;
    for (std::size_t held = 0; held < splits.size(); ++held) {
        std::vector<const ScoredPair*> rest;
        std::vector<double> scores;
        for (std::size_t s = 0; s < splits.size(); ++s) {
            if (s == held) continue;
            for (const auto& p : splits[s]) {
                rest.push_back(&p);
                scores.push_back(p.score);
            }
        }
        std::sort(scores.begin(), scores.end(), std::greater<>());
        scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
        // Candidate thresholds sit between adjacent scores (every achievable
        // dichotomy), plus accept-none and accept-all.
        std::vector<double> candidates{std::numeric_limits<double>::infinity()};
        for (std::size_t i = 1; i < scores.size(); ++i) {
            candidates.push_back(0.5 * (scores[i - 1] + scores[i]));
        }
        candidates.push_back(scores.back());

        double best_acc = -1.0, best_threshold = candidates.front();
        for (double t : candidates) {  // descending: ties keep the highest threshold
            const double acc = accuracy_at(rest, t);
            if (acc > best_acc) {
                best_acc = acc;
                best_threshold = t;
            }
        }

        std::vector<const ScoredPair*> held_pairs;
        for (const auto& p : splits[held]) held_pairs.push_back(&p);
        result.per_split.push_back(accuracy_at(held_pairs, best_threshold));
    }

    double mean = 0.0;
    for (double v : result.per_split) mean += v;
    mean /= static_cast<double>(result.per_split.size());
    double var = 0.0;
    for (double v : result.per_split) var += (v - mean) * (v - mean);
    var /= static_cast<double>(result.per_split.size());
    result.mean = mean;
    result.stddev = std::sqrt(var);
    return result;
}

double identification_accuracy(std::span<const EmbeddedSample> references,
                               std::span<const EmbeddedSample> queries,
                               std::span<const EmbeddedSample> distractors) {
    if (references.size() != queries.size() || references.empty()) {
        throw ContractError("identification: need matched, nonempty reference/query lists");
    }
    std::set<int> query_ids;
    for (std::size_t i = 0; i < references.size(); ++i) {
        if (references[i].identity != queries[i].identity) {
            throw ContractError("identification: pair " + std::to_string(i) +
                                " mixes identities " + std::to_string(references[i].identity) +
                                " and " + std::to_string(queries[i].identity));
        }
        query_ids.insert(queries[i].identity);
    }
    for (const auto& d : distractors) {
        if (query_ids.count(d.identity)) {
            throw ContractError("identification: distractor shares identity " +
                                std::to_string(d.identity) + " with a query");
        }
    }

    std::size_t correct = 0;
    for (std::size_t i = 0; i < references.size(); ++i) {
        const double query_dist = cosine_distance(references[i].embedding, queries[i].embedding);
        bool ok = true;
        for (const auto& d : distractors) {
            // Strictly closer invalidates the pair; a tie does not.
            if (cosine_distance(references[i].embedding, d.embedding) < query_dist) {
                ok = false;
                break;
            }
        }
        if (ok) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(references.size());
}

double rank1(std::span<const EmbeddedSample> probes, std::span<const EmbeddedSample> gallery) {
    if (probes.empty() || gallery.empty()) {
        throw ContractError("rank1: probes and gallery must be nonempty");
    }
    std::set<int> gallery_ids;
    for (const auto& g : gallery) gallery_ids.insert(g.identity);
    std::size_t correct = 0;
    for (const auto& p : probes) {
        if (!gallery_ids.count(p.identity)) {
            throw ContractError("rank1: probe identity " + std::to_string(p.identity) +
                                " absent from the gallery");
        }
        std::size_t best = 0;
        double best_sim = -std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < gallery.size(); ++g) {
            const double sim = cosine(p.embedding, gallery[g].embedding);
            if (sim > best_sim) {  // ties keep the lowest index
                best_sim = sim;
                best = g;
            }
        }
        if (gallery[best].identity == p.identity) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probes.size());
}

std::vector<std::vector<double>> embed_gallery(const ModelParams& params,
                                               std::span<const Sample> samples) {
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    if (samples.empty()) return out;
    const std::size_t dim = params.config.input_dim;
    std::vector<double> data;
    data.reserve(samples.size() * dim);
    for (const auto& s : samples) {
        if (s.x.size() != dim) {
            throw DimensionError("embed_gallery: sample dim " + std::to_string(s.x.size()) +
                                 " does not match input_dim " + std::to_string(dim));
        }
        data.insert(data.end(), s.x.begin(), s.x.end());
    }
    Tensor repr = forward_repr_batch(params, Tensor::from_data({samples.size(), dim}, data));
    const std::size_t rd = params.config.repr_dim();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out.emplace_back(repr.data().begin() + static_cast<std::ptrdiff_t>(i * rd),
                         repr.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * rd));
    }
    return out;
}

namespace {

struct DomainEmbeddings {
    std::vector<std::vector<double>> vectors;  // aligned with domain.samples
    const DomainDataset* domain = nullptr;
};

std::vector<std::vector<ScoredPair>> build_verification_splits(const DomainEmbeddings& emb,
                                                               const EvalOptions& opts, Rng& rng) {
    const auto& ds = *emb.domain;
    std::vector<int> pair_ids;  // identities with at least two samples
    std::vector<int> all_ids;
    for (const auto& [id, idxs] : ds.identity_index) {
        all_ids.push_back(id);
        if (idxs.size() >= 2) pair_ids.push_back(id);
    }
    if (pair_ids.empty() || all_ids.size() < 2) {
        throw ContractError("evaluate: domain " + std::to_string(ds.domain_id) +
                            " cannot form verification pairs");
    }

    auto score = [&](std::size_t a, std::size_t b) {
        return cosine(emb.vectors[a], emb.vectors[b]);
    };
    std::vector<std::vector<ScoredPair>> splits(opts.num_splits);
    for (auto& split : splits) {
        for (std::size_t n = 0; n < opts.pairs_per_split; ++n) {
            const int id = pair_ids[rng.uniform_index(pair_ids.size())];
            const auto& idxs = ds.identity_index.at(id);
            const std::size_t a = rng.uniform_index(idxs.size());
            std::size_t b = rng.uniform_index(idxs.size() - 1);
            if (b >= a) ++b;
            split.push_back({score(idxs[a], idxs[b]), true});
        }
        for (std::size_t n = 0; n < opts.pairs_per_split; ++n) {
            const std::size_t ia = rng.uniform_index(all_ids.size());
            std::size_t ib = rng.uniform_index(all_ids.size() - 1);
            if (ib >= ia) ++ib;
            const auto& lista = ds.identity_index.at(all_ids[ia]);
            const auto& listb = ds.identity_index.at(all_ids[ib]);
            split.push_back({score(lista[rng.uniform_index(lista.size())],
                                   listb[rng.uniform_index(listb.size())]),
                             false});
        }
    }
    return splits;
}

}  // namespace

EvalReport evaluate_domain(const ModelParams& params, const DomainDataset& domain,
                           const EvalOptions& opts, RocCurve* curve_out) {
    if (opts.num_splits != 10) {
        throw ContractError("evaluate: the verification protocol uses 10 splits");
    }
    DomainEmbeddings emb;
    emb.domain = &domain;
    emb.vectors = embed_gallery(params, domain.samples);

    Rng rng(opts.seed);
    auto splits = build_verification_splits(emb, opts, rng);

    std::vector<ScoredPair> pooled;
    for (const auto& s : splits) pooled.insert(pooled.end(), s.begin(), s.end());
    RocCurve curve = roc(pooled);
    if (curve_out != nullptr) *curve_out = curve;

    EvalReport report;
    report.held_out_domain = domain.domain_id;
    for (double level : opts.far_levels) {
        report.tar_at_far.emplace_back(level, curve.tar_at(level));
    }
    report.auc = curve.auc;

    auto verification = verification_accuracy_10split(splits);
    report.verification_mean = verification.mean;
    report.verification_std = verification.stddev;

    // Rank-1: the first sample of every identity forms the gallery.
    std::vector<EmbeddedSample> gallery, probes;
    for (const auto& [id, idxs] : domain.identity_index) {
        gallery.push_back({emb.vectors[idxs[0]], id});
        for (std::size_t i = 1; i < idxs.size(); ++i) probes.push_back({emb.vectors[idxs[i]], id});
    }
    report.rank1 = probes.empty() ? 1.0 : rank1(probes, gallery);

    // Identification: leading identities form (reference, query) pairs, the
    // remainder contribute every sample as a distractor.
    std::vector<int> pair_ids;
    for (const auto& [id, idxs] : domain.identity_index) {
        if (idxs.size() >= 2) pair_ids.push_back(id);
    }
    const std::size_t eval_count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(opts.identification_eval_fraction *
                                              static_cast<double>(pair_ids.size()))));
    std::set<int> eval_ids(pair_ids.begin(),
                           pair_ids.begin() + static_cast<std::ptrdiff_t>(
                                                  std::min(eval_count, pair_ids.size())));
    std::vector<EmbeddedSample> refs, queries, distractors;
    for (const auto& [id, idxs] : domain.identity_index) {
        if (eval_ids.count(id)) {
            refs.push_back({emb.vectors[idxs[0]], id});
            queries.push_back({emb.vectors[idxs[1]], id});
        } else {
            for (std::size_t i : idxs) distractors.push_back({emb.vectors[i], id});
        }
    }
    report.identification_accuracy = identification_accuracy(refs, queries, distractors);
    return report;
}

EvalReport leave_one_domain_out(const std::vector<DomainDataset>& all_domains, int held_out_id,
                                const TrainFn& train_fn, const EvalOptions& opts) {
    if (all_domains.size() < 3) {
        throw ContractError("leave_one_domain_out: need at least three domains");
    }
    std::vector<DomainDataset> training;
    const DomainDataset* held = nullptr;
    for (const auto& ds : all_domains) {
        if (ds.domain_id == held_out_id) {
            held = &ds;
        } else {
            training.push_back(ds);
        }
    }
    if (held == nullptr) {
        throw ContractError("leave_one_domain_out: no domain with id " +
                            std::to_string(held_out_id));
    }
    ModelParams params = train_fn(training);
    return evaluate_domain(params, *held, opts);
}

// ---- report serialization ----------------------------------------------------

std::string EvalReport::to_json_string() const {
    nlohmann::json j;
    j["held_out_domain"] = held_out_domain;
    nlohmann::json tar = nlohmann::json::object();
    for (const auto& [level, value] : tar_at_far) tar[format_level(level)] = value;
    j["tar_at_far"] = tar;
    j["rank1"] = rank1;
    j["auc"] = auc;
    j["verification_mean"] = verification_mean;
    j["verification_std"] = verification_std;
    j["identification_accuracy"] = identification_accuracy;
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
    EvalReport r;
    r.held_out_domain = j.at("held_out_domain").get<int>();
    for (const auto& [key, value] : j.at("tar_at_far").items()) {
        r.tar_at_far.emplace_back(std::stod(key), value.get<double>());
    }
    std::sort(r.tar_at_far.begin(), r.tar_at_far.end());
    r.rank1 = j.at("rank1").get<double>();
    r.auc = j.at("auc").get<double>();
    r.verification_mean = j.at("verification_mean").get<double>();
    r.verification_std = j.at("verification_std").get<double>();
    r.identification_accuracy = j.at("identification_accuracy").get<double>();
    return r;
}

void save_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report: " + path);
    out << report.to_json_string();
    if (!out) throw IoError("failed writing report: " + path);
}

EvalReport load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read report: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return EvalReport::from_json_string(buf.str());
}

}  // namespace cdml
