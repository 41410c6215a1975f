#include "cdml/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cdml/errors.hpp"

namespace cdml {

void ModelConfig::validate() const {
    if (input_dim == 0 || hidden_dim == 0 || map_height == 0 || map_width == 0 || map_depth == 0) {
        throw ContractError("ModelConfig: all dimensions must be positive");
    }
    if (embed_dim == 0 || embed_dim > repr_dim()) {
        throw ContractError("ModelConfig: embed_dim must be in [1, repr_dim]");
    }
}

namespace {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.num_classes == 0) {
        throw ContractError("ModelParams::init: num_classes must be set");
    }
    ModelParams p;
    p.config = cfg;
    p.repr_w1 = init_uniform({cfg.hidden_dim, cfg.input_dim}, cfg.input_dim, rng);
    p.repr_b1 = init_uniform({cfg.hidden_dim}, cfg.input_dim, rng);
    p.repr_w2 = init_uniform({cfg.repr_dim(), cfg.hidden_dim}, cfg.hidden_dim, rng);
    p.repr_b2 = init_uniform({cfg.repr_dim()}, cfg.hidden_dim, rng);
    p.cls_weights = init_uniform({cfg.num_classes, cfg.repr_dim()}, cfg.repr_dim(), rng);
    p.emb_w = init_uniform({cfg.embed_dim, cfg.repr_dim()}, cfg.repr_dim(), rng);
    p.emb_b = init_uniform({cfg.embed_dim}, cfg.repr_dim(), rng);
    return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    return {
        {"repr.w1", repr_w1}, {"repr.b1", repr_b1}, {"repr.w2", repr_w2}, {"repr.b2", repr_b2},
        {"cls.weights", cls_weights}, {"emb.w", emb_w}, {"emb.b", emb_b},
    };
}

std::vector<Tensor> ModelParams::tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

ModelParams ModelParams::clone() const {
    ModelParams p;
    p.config = config;
    p.repr_w1 = repr_w1.detach(true);
    p.repr_b1 = repr_b1.detach(true);
    p.repr_w2 = repr_w2.detach(true);
    p.repr_b2 = repr_b2.detach(true);
    p.cls_weights = cls_weights.detach(true);
    p.emb_w = emb_w.detach(true);
    p.emb_b = emb_b.detach(true);
    return p;
}

ModelParams inner_update(const ModelParams& params, std::span<const Tensor> grads, double alpha,
                         bool differentiable) {
    auto source = params.tensors();
    if (grads.size() != source.size()) {
        throw ContractError("inner_update: expected " + std::to_string(source.size()) +
                            " gradients, got " + std::to_string(grads.size()));
    }
    std::vector<Tensor> updated;
    updated.reserve(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        if (grads[i].shape() != source[i].shape()) {
            throw ContractError("inner_update: gradient " + std::to_string(i) + " has shape " +
                                shape_to_string(grads[i].shape()) + ", parameter is " +
                                shape_to_string(source[i].shape()));
        }
        if (differentiable) {
            updated.push_back(sub(source[i], scale(grads[i], alpha)));
        } else {
            std::vector<double> data = source[i].data();
            const auto& g = grads[i].data();
            for (std::size_t k = 0; k < data.size(); ++k) data[k] -= alpha * g[k];
            updated.push_back(Tensor::from_data(source[i].shape(), std::move(data), true));
        }
    }
    ModelParams out;
    out.config = params.config;
    out.repr_w1 = updated[0];
    out.repr_b1 = updated[1];
    out.repr_w2 = updated[2];
    out.repr_b2 = updated[3];
    out.cls_weights = updated[4];
    out.emb_w = updated[5];
    out.emb_b = updated[6];
    return out;
}

Tensor forward_repr_batch(const ModelParams& params, const Tensor& inputs) {
    if (inputs.rank() != 2 || inputs.shape()[1] != params.config.input_dim) {
        throw DimensionError("forward_repr: inputs " + shape_to_string(inputs.shape()) +
                             " do not match input_dim " + std::to_string(params.config.input_dim));
    }
    Tensor h = matmul(inputs, transpose(params.repr_w1));
    h = relu(add(h, expand(params.repr_b1, h.shape(), {0})));
    Tensor out = matmul(h, transpose(params.repr_w2));
    return add(out, expand(params.repr_b2, out.shape(), {0}));
}

FeatureMap forward_repr(const ModelParams& params, const Tensor& input) {
    if (input.rank() != 1) {
        throw DimensionError("forward_repr: expected rank-1 input, got " +
                             shape_to_string(input.shape()));
    }
    Tensor flat = forward_repr_batch(params, reshape(input, {1, input.shape()[0]}));
    return FeatureMap(reshape(flat, {params.config.map_height, params.config.map_width,
                                     params.config.map_depth}));
}

Tensor embed_from_repr(const ModelParams& params, const Tensor& repr_rows) {
    Tensor e = matmul(repr_rows, transpose(params.emb_w));
    e = add(e, expand(params.emb_b, e.shape(), {0}));
    return l2_normalize_rows(e);
}

Tensor classify_from_repr(const ModelParams& params, const Tensor& repr_rows) {
    Tensor features = l2_normalize_rows(repr_rows);
    Tensor rows = l2_normalize_rows(params.cls_weights);
    return matmul(features, transpose(rows));
}

Tensor forward_embed(const ModelParams& params, const Tensor& input) {
    Tensor flat = forward_repr(params, input).flatten();
    Tensor rows = embed_from_repr(params, reshape(flat, {1, params.config.repr_dim()}));
    return reshape(rows, {params.config.embed_dim});
}

Tensor forward_classify(const ModelParams& params, const Tensor& input) {
    Tensor flat = forward_repr(params, input).flatten();
    Tensor rows = classify_from_repr(params, reshape(flat, {1, params.config.repr_dim()}));
    return reshape(rows, {params.config.num_classes});
}

// ---- checkpoint ------------------------------------------------------------

std::string checkpoint_to_json(const ModelParams& params) {
    nlohmann::json j;
    j["format"] = "cdml-checkpoint";
    j["version"] = 1;
    j["model"] = {
        {"input_dim", params.config.input_dim},   {"hidden_dim", params.config.hidden_dim},
        {"map_height", params.config.map_height}, {"map_width", params.config.map_width},
        {"map_depth", params.config.map_depth},   {"embed_dim", params.config.embed_dim},
        {"num_classes", params.config.num_classes},
    };
    nlohmann::json tensors;
    for (const auto& [name, t] : params.named()) {
        tensors[name] = {{"shape", t.shape()}, {"data", t.data()}};
    }
    j["params"] = tensors;
    return j.dump(2) + "\n";
}

ModelParams checkpoint_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
    if (j.value("format", "") != "cdml-checkpoint") {
        throw ParseError("checkpoint: missing cdml-checkpoint format tag");
    }
    ModelConfig cfg;
    const auto& m = j.at("model");
    cfg.input_dim = m.at("input_dim").get<std::size_t>();
    cfg.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    cfg.map_height = m.at("map_height").get<std::size_t>();
    cfg.map_width = m.at("map_width").get<std::size_t>();
    cfg.map_depth = m.at("map_depth").get<std::size_t>();
    cfg.embed_dim = m.at("embed_dim").get<std::size_t>();
    cfg.num_classes = m.at("num_classes").get<std::size_t>();
    cfg.validate();

    ModelParams p;
    p.config = cfg;
    auto read = [&](const char* name) {
        const auto& entry = j.at("params").at(name);
        Shape shape = entry.at("shape").get<Shape>();
        auto data = entry.at("data").get<std::vector<double>>();
        return Tensor::from_data(std::move(shape), std::move(data), true);
    };
    p.repr_w1 = read("repr.w1");
    p.repr_b1 = read("repr.b1");
    p.repr_w2 = read("repr.w2");
    p.repr_b2 = read("repr.b2");
    p.cls_weights = read("cls.weights");
    p.emb_w = read("emb.w");
    p.emb_b = read("emb.b");
    return p;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << checkpoint_to_json(params);
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_json(buf.str());
}

}  // namespace cdml
