#include "cdml/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "cdml/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary dataset format assumes a little-endian host");

namespace cdml {

void DomainDataset::rebuild_index() {
    identity_index.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        identity_index[samples[i].identity].push_back(i);
    }
}

// ---- transforms ------------------------------------------------------------

std::vector<double> DomainTransform::apply(const std::vector<double>& v) const {
    const std::size_t d = v.size();
    std::vector<double> scaled(d);
    for (std::size_t i = 0; i < d; ++i) scaled[i] = scale_diag[i] * v[i];
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += rotation[i * d + j] * scaled[j];
        out[i] = acc + translation[i];
    }
    return out;
}

DomainTransform DomainTransform::identity(std::size_t dim) {
    DomainTransform t;
    t.rotation.assign(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) t.rotation[i * dim + i] = 1.0;
    t.scale_diag.assign(dim, 1.0);
    t.translation.assign(dim, 0.0);
    return t;
}

DomainTransform DomainTransform::random(std::size_t dim, bool rotate, double scale_min,
                                        double scale_max, double translation_sigma, Rng& rng) {
    DomainTransform t = identity(dim);
    if (rotate) {
        // Gram-Schmidt on a Gaussian matrix yields a uniform-enough rotation.
        std::vector<std::vector<double>> rows(dim, std::vector<double>(dim));
        for (auto& row : rows)
            for (auto& v : row) v = rng.gaussian();
        for (std::size_t i = 0; i < dim; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                double dot = 0.0;
                for (std::size_t k = 0; k < dim; ++k) dot += rows[i][k] * rows[j][k];
                for (std::size_t k = 0; k < dim; ++k) rows[i][k] -= dot * rows[j][k];
            }
            double norm = 0.0;
            for (double v : rows[i]) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                rows[i][i % dim] = 1.0;
                norm = 1.0;
            }
            for (auto& v : rows[i]) v /= norm;
        }
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) t.rotation[i * dim + j] = rows[i][j];
    }
    for (auto& s : t.scale_diag) s = rng.uniform(scale_min, scale_max);
    for (auto& v : t.translation) v = translation_sigma * rng.gaussian();
    return t;
}

// ---- generation ------------------------------------------------------------

void SynthConfig::validate() const {
    if (num_domains < 1) throw ContractError("SynthConfig: need at least one domain");
    if (identities_per_domain < 2) {
        throw ContractError("SynthConfig: need at least two identities per domain");
    }
    if (samples_per_identity < 1 || input_dim == 0) {
        throw ContractError("SynthConfig: samples_per_identity and input_dim must be positive");
    }
    if (sigma_id < 0.0 || prototype_scale < 0.0) {
        throw ContractError("SynthConfig: scales must be non-negative");
    }
    if (!explicit_transforms.empty() && explicit_transforms.size() != num_domains) {
        throw ContractError("SynthConfig: explicit_transforms must cover every domain");
    }
}

std::vector<DomainDataset> generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    std::vector<std::vector<double>> prototypes(cfg.identities_per_domain);
    for (auto& p : prototypes) p = rng.gaussian_vector(cfg.input_dim, cfg.prototype_scale);

    std::vector<DomainDataset> domains;
    domains.reserve(cfg.num_domains);
    for (std::size_t d = 0; d < cfg.num_domains; ++d) {
        DomainTransform transform =
            cfg.explicit_transforms.empty()
                ? DomainTransform::random(cfg.input_dim, cfg.transform.rotate,
                                          cfg.transform.scale_min, cfg.transform.scale_max,
                                          cfg.transform.translation_sigma, rng)
                : cfg.explicit_transforms[d];
        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        for (std::size_t f = 0; f < cfg.identities_per_domain; ++f) {
            const int identity = static_cast<int>(d * cfg.identities_per_domain + f);
            for (std::size_t s = 0; s < cfg.samples_per_identity; ++s) {
                std::vector<double> v(cfg.input_dim);
                for (std::size_t k = 0; k < cfg.input_dim; ++k) {
                    v[k] = prototypes[f][k] + cfg.sigma_id * rng.gaussian();
                }
                ds.samples.push_back({transform.apply(v), identity});
            }
        }
        ds.rebuild_index();
        domains.push_back(std::move(ds));
    }
    validate_datasets(domains);
    return domains;
}

// ---- augmentation ----------------------------------------------------------

std::vector<double> augment_with_span(const std::vector<double>& x, double sigma,
                                      std::size_t span_begin, std::size_t span_end, Rng& rng) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sigma * rng.gaussian();
    span_end = std::min(span_end, out.size());
    for (std::size_t i = span_begin; i < span_end; ++i) out[i] = 0.0;
    return out;
}

std::vector<double> augment(const std::vector<double>& x, Rng& rng, const AugmentOptions& opts) {
    double sigma = opts.sigma;
    if (sigma < 0.0) {
        double norm = 0.0;
        for (double v : x) norm += v * v;
        sigma = 0.05 * std::sqrt(norm) / std::sqrt(static_cast<double>(std::max<std::size_t>(x.size(), 1)));
    }
    const auto max_span =
        static_cast<std::size_t>(opts.max_span_fraction * static_cast<double>(x.size()));
    const std::size_t span_len = max_span == 0 ? 0 : rng.uniform_index(max_span + 1);
    const std::size_t span_begin =
        x.size() == 0 ? 0 : rng.uniform_index(x.size() - std::min(span_len, x.size()) + 1);
    return augment_with_span(x, sigma, span_begin, span_begin + span_len, rng);
}

// ---- triplet sampling ------------------------------------------------------

TripletBatch sample_triplets(const DomainDataset& ds, std::size_t batch, Rng& rng) {
    if (batch == 0) throw ContractError("sample_triplets: batch must be positive");
    const std::size_t n_ids = ds.num_identities();
    if (n_ids < 2) {
        throw ContractError("sample_triplets: domain " + std::to_string(ds.domain_id) +
                            " needs at least two identities");
    }
    if (n_ids < batch) {
        throw ContractError("sample_triplets: domain " + std::to_string(ds.domain_id) + " has " +
                            std::to_string(n_ids) + " identities, " + std::to_string(batch) +
                            " requested (short by " + std::to_string(batch - n_ids) + ")");
    }

    std::vector<int> ids;
    ids.reserve(n_ids);
    for (const auto& [id, idxs] : ds.identity_index) ids.push_back(id);

    TripletBatch out;
    out.domain_id = ds.domain_id;
    for (std::size_t pick : rng.sample_without_replacement(n_ids, batch)) {
        const int identity = ids[pick];
        const auto& own = ds.identity_index.at(identity);

        TripletEntry e;
        e.anchor_identity = identity;
        const std::size_t a_local = rng.uniform_index(own.size());
        e.anchor_index = own[a_local];
        e.anchor = ds.samples[e.anchor_index].x;

        if (own.size() >= 2) {
            std::size_t p_local = rng.uniform_index(own.size() - 1);
            if (p_local >= a_local) ++p_local;
            e.positive_index = static_cast<long>(own[p_local]);
            e.positive = ds.samples[own[p_local]].x;
        } else {
            e.positive_index = -1;
            e.positive = augment(e.anchor, rng);
        }

        std::size_t other = rng.uniform_index(n_ids - 1);
        if (other >= pick) ++other;
        const auto& neg_list = ds.identity_index.at(ids[other]);
        e.negative_identity = ids[other];
        e.negative_index = neg_list[rng.uniform_index(neg_list.size())];
        e.negative = ds.samples[e.negative_index].x;

        out.entries.push_back(std::move(e));
    }
    return out;
}

// ---- validation ------------------------------------------------------------

void validate_datasets(const std::vector<DomainDataset>& domains) {
    std::set<int> seen_ids;
    std::set<int> seen_domains;
    for (const auto& ds : domains) {
        if (!seen_domains.insert(ds.domain_id).second) {
            throw ContractError("datasets: duplicate domain id " + std::to_string(ds.domain_id));
        }
        for (const auto& [id, idxs] : ds.identity_index) {
            if (idxs.empty()) {
                throw ContractError("datasets: identity " + std::to_string(id) + " has no samples");
            }
            if (!seen_ids.insert(id).second) {
                throw ContractError("datasets: identity " + std::to_string(id) +
                                    " appears in more than one domain");
            }
        }
    }
}

// ---- text format -----------------------------------------------------------

namespace {

constexpr char kTextMagic[] = "cdml-dataset";
constexpr char kBinaryMagic[8] = {'C', 'D', 'M', 'L', 'D', 'S', '0', '1'};

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void store_text(const std::vector<DomainDataset>& domains, std::ostream& out,
                std::size_t input_dim) {
    out << kTextMagic << ",1," << domains.size() << ',' << input_dim << '\n';
    for (const auto& ds : domains) {
        for (const auto& s : ds.samples) {
            out << ds.domain_id << ',' << s.identity;
            for (double v : s.x) out << ',' << format_double(v);
            out << '\n';
        }
    }
}

std::vector<DomainDataset> load_text(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw ParseError("dataset: empty file (line 1)");
    ++lineno;
    std::istringstream header(line);
    std::string magic, version, k_str, dim_str;
    if (!std::getline(header, magic, ',') || magic != kTextMagic) {
        throw ParseError("dataset: bad magic on line 1");
    }
    if (!std::getline(header, version, ',') || version != "1") {
        throw ParseError("dataset: unsupported version on line 1");
    }
    if (!std::getline(header, k_str, ',') || !std::getline(header, dim_str, ',')) {
        throw ParseError("dataset: malformed header on line 1");
    }
    std::size_t k = 0, dim = 0;
    try {
        k = std::stoul(k_str);
        dim = std::stoul(dim_str);
    } catch (const std::exception&) {
        throw ParseError("dataset: non-numeric header field on line 1");
    }

    std::vector<DomainDataset> domains;
    std::map<int, std::size_t> slot;  // domain id -> position, first appearance order
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        auto next = [&](const char* what) {
            if (!std::getline(ss, field, ',')) {
                throw ParseError("dataset: missing " + std::string(what) + " on line " +
                                 std::to_string(lineno));
            }
            return field;
        };
        int domain_id = 0, identity = 0;
        try {
            domain_id = std::stoi(next("domain id"));
            identity = std::stoi(next("identity"));
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception&) {
            throw ParseError("dataset: non-numeric id on line " + std::to_string(lineno));
        }
        Sample s;
        s.identity = identity;
        s.x.reserve(dim);
        while (std::getline(ss, field, ',')) {
            try {
                s.x.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw ParseError("dataset: bad float '" + field + "' on line " +
                                 std::to_string(lineno));
            }
        }
        if (s.x.size() != dim) {
            throw ParseError("dataset: expected " + std::to_string(dim) + " values, got " +
                             std::to_string(s.x.size()) + " on line " + std::to_string(lineno));
        }
        auto it = slot.find(domain_id);
        if (it == slot.end()) {
            it = slot.emplace(domain_id, domains.size()).first;
            DomainDataset ds;
            ds.domain_id = domain_id;
            domains.push_back(std::move(ds));
        }
        domains[it->second].samples.push_back(std::move(s));
    }
    if (domains.size() != k) {
        throw ParseError("dataset: header promises " + std::to_string(k) + " domains, found " +
                         std::to_string(domains.size()));
    }
    for (auto& ds : domains) ds.rebuild_index();
    validate_datasets(domains);
    return domains;
}

// ---- binary format ---------------------------------------------------------

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, std::size_t& offset) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("dataset: truncated binary at offset " + std::to_string(offset));
    offset += sizeof(T);
    return v;
}

void store_binary(const std::vector<DomainDataset>& domains, std::ostream& out,
                  std::size_t input_dim) {
    out.write(kBinaryMagic, sizeof(kBinaryMagic));
    write_raw<std::uint64_t>(out, domains.size());
    write_raw<std::uint64_t>(out, input_dim);
    for (const auto& ds : domains) {
        write_raw<std::int64_t>(out, ds.domain_id);
        write_raw<std::uint64_t>(out, ds.samples.size());
        for (const auto& s : ds.samples) {
            write_raw<std::int64_t>(out, s.identity);
            out.write(reinterpret_cast<const char*>(s.x.data()),
                      static_cast<std::streamsize>(sizeof(double) * s.x.size()));
        }
    }
}

std::vector<DomainDataset> load_binary(std::istream& in) {
    std::size_t offset = 0;
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kBinaryMagic, sizeof(magic)) != 0) {
        throw ParseError("dataset: bad binary magic at offset 0");
    }
    offset += sizeof(magic);
    const auto k = read_raw<std::uint64_t>(in, offset);
    const auto dim = read_raw<std::uint64_t>(in, offset);
    std::vector<DomainDataset> domains;
    for (std::uint64_t d = 0; d < k; ++d) {
        DomainDataset ds;
        ds.domain_id = static_cast<int>(read_raw<std::int64_t>(in, offset));
        const auto n = read_raw<std::uint64_t>(in, offset);
        ds.samples.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            Sample s;
            s.identity = static_cast<int>(read_raw<std::int64_t>(in, offset));
            s.x.resize(dim);
            in.read(reinterpret_cast<char*>(s.x.data()),
                    static_cast<std::streamsize>(sizeof(double) * dim));
            if (!in) {
                throw ParseError("dataset: truncated binary at offset " + std::to_string(offset));
            }
            offset += sizeof(double) * dim;
            ds.samples.push_back(std::move(s));
        }
        ds.rebuild_index();
        domains.push_back(std::move(ds));
    }
    validate_datasets(domains);
    return domains;
}

}  // namespace

void store_datasets(const std::vector<DomainDataset>& domains, const std::string& path,
                    DatasetFormat format) {
    validate_datasets(domains);
    std::size_t input_dim = 0;
    for (const auto& ds : domains) {
        if (ds.samples.empty()) {
            throw ContractError("store_datasets: domain " + std::to_string(ds.domain_id) +
                                " has no samples");
        }
        if (input_dim == 0) input_dim = ds.samples.front().x.size();
        for (const auto& s : ds.samples) {
            if (s.x.size() != input_dim) {
                throw ContractError("store_datasets: inconsistent sample dimension");
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset: " + path);
    if (format == DatasetFormat::text) {
        store_text(domains, out, input_dim);
    } else {
        store_binary(domains, out, input_dim);
    }
    if (!out) throw IoError("failed writing dataset: " + path);
}

std::vector<DomainDataset> load_datasets(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read dataset: " + path);
    char sniff[8] = {};
    in.read(sniff, sizeof(sniff));
    in.clear();
    in.seekg(0);
    if (std::memcmp(sniff, kBinaryMagic, sizeof(kBinaryMagic)) == 0) {
        return load_binary(in);
    }
    return load_text(in);
}

}  // namespace cdml
