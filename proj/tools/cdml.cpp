// Command-line front end: dataset synthesis, episodic training, held-out
// evaluation, and the leave-one-domain-out harness.
//
// Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdml/data.hpp"
#include "cdml/errors.hpp"
#include "cdml/eval.hpp"
#include "cdml/model.hpp"
#include "cdml/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
    std::uint64_t seed = 1;
    cdml::SynthConfig data;
    cdml::ModelConfig model;
    cdml::TrainConfig train;
    cdml::LossConfig loss;
    cdml::EvalOptions eval;
};

std::string lmcl_form_name(cdml::LmclForm form) {
    return form == cdml::LmclForm::paper ? "paper" : "cosface";
}

cdml::LmclForm parse_lmcl_form(const std::string& name) {
    if (name == "paper") return cdml::LmclForm::paper;
    if (name == "cosface") return cdml::LmclForm::cosface;
    throw cdml::ContractError("config: lmcl_form must be 'paper' or 'cosface', got '" + name + "'");
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::istringstream ss(text);
    std::string field;
    while (std::getline(ss, field, ',')) {
        try {
            out.push_back(std::stod(field));
        } catch (const std::exception&) {
            throw cdml::ContractError(std::string("config: bad ") + what + " entry '" + field + "'");
        }
    }
    if (out.empty()) throw cdml::ContractError(std::string("config: empty ") + what + " list");
    return out;
}

json config_to_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["data"] = {
        {"domains", cfg.data.num_domains},
        {"identities_per_domain", cfg.data.identities_per_domain},
        {"samples_per_identity", cfg.data.samples_per_identity},
        {"input_dim", cfg.data.input_dim},
        {"prototype_scale", cfg.data.prototype_scale},
        {"sigma_id", cfg.data.sigma_id},
        {"rotate", cfg.data.transform.rotate},
        {"scale_min", cfg.data.transform.scale_min},
        {"scale_max", cfg.data.transform.scale_max},
        {"translation_sigma", cfg.data.transform.translation_sigma},
    };
    j["model"] = {
        {"hidden_dim", cfg.model.hidden_dim},
        {"map_height", cfg.model.map_height},
        {"map_width", cfg.model.map_width},
        {"map_depth", cfg.model.map_depth},
        {"embed_dim", cfg.model.embed_dim},
    };
    j["train"] = {
        {"alpha", cfg.train.alpha},
        {"beta", cfg.train.beta},
        {"lambda", cfg.train.lambda},
        {"batch", cfg.train.batch},
        {"steps", cfg.train.steps},
        {"decay_steps", cfg.train.decay_steps},
        {"weight_decay", cfg.train.weight_decay},
        {"momentum", cfg.train.momentum},
        {"second_order", cfg.train.second_order},
        {"enable_cls", cfg.train.enable_cls},
        {"enable_trp", cfg.train.enable_trp},
        {"enable_cdt", cfg.train.enable_cdt},
        {"cov_grad", cfg.train.cov_grad},
        {"lmcl_form", lmcl_form_name(cfg.train.lmcl_form)},
        {"checkpoint_every", cfg.train.checkpoint_every},
    };
    j["loss"] = {
        {"tau", cfg.loss.tau},
        {"rho", cfg.loss.rho},
        {"margin_m", cfg.loss.m},
        {"scale_s", cfg.loss.s},
    };
    j["eval"] = {
        {"far_levels", cfg.eval.far_levels},
        {"pairs_per_split", cfg.eval.pairs_per_split},
        {"identification_eval_fraction", cfg.eval.identification_eval_fraction},
    };
    return j;
}

template <typename T>
void assign(const json& v, T& out, const std::string& where) {
    try {
        out = v.get<T>();
    } catch (const json::exception&) {
        throw cdml::ContractError("config: bad value for '" + where + "'");
    }
}

void apply_config_json(RunConfig& cfg, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "invocation") {
            continue;  // config echoes carry their provenance; accept them as inputs
        } else if (key == "seed") {
            assign(value, cfg.seed, key);
        } else if (key == "data") {
            for (const auto& [k, v] : value.items()) {
                if (k == "domains") assign(v, cfg.data.num_domains, "data.domains");
                else if (k == "identities_per_domain") assign(v, cfg.data.identities_per_domain, k);
                else if (k == "samples_per_identity") assign(v, cfg.data.samples_per_identity, k);
                else if (k == "input_dim") assign(v, cfg.data.input_dim, k);
                else if (k == "prototype_scale") assign(v, cfg.data.prototype_scale, k);
                else if (k == "sigma_id") assign(v, cfg.data.sigma_id, k);
                else if (k == "rotate") assign(v, cfg.data.transform.rotate, k);
                else if (k == "scale_min") assign(v, cfg.data.transform.scale_min, k);
                else if (k == "scale_max") assign(v, cfg.data.transform.scale_max, k);
                else if (k == "translation_sigma") assign(v, cfg.data.transform.translation_sigma, k);
                else throw cdml::ContractError("config: unknown key 'data." + k + "'");
            }
        } else if (key == "model") {
            for (const auto& [k, v] : value.items()) {
                if (k == "hidden_dim") assign(v, cfg.model.hidden_dim, k);
                else if (k == "map_height") assign(v, cfg.model.map_height, k);
                else if (k == "map_width") assign(v, cfg.model.map_width, k);
                else if (k == "map_depth") assign(v, cfg.model.map_depth, k);
                else if (k == "embed_dim") assign(v, cfg.model.embed_dim, k);
                else throw cdml::ContractError("config: unknown key 'model." + k + "'");
            }
        } else if (key == "train") {
            for (const auto& [k, v] : value.items()) {
                if (k == "alpha") assign(v, cfg.train.alpha, k);
                else if (k == "beta") assign(v, cfg.train.beta, k);
                else if (k == "lambda") assign(v, cfg.train.lambda, k);
                else if (k == "batch") assign(v, cfg.train.batch, k);
                else if (k == "steps") assign(v, cfg.train.steps, k);
                else if (k == "decay_steps") assign(v, cfg.train.decay_steps, k);
                else if (k == "weight_decay") assign(v, cfg.train.weight_decay, k);
                else if (k == "momentum") assign(v, cfg.train.momentum, k);
                else if (k == "second_order") assign(v, cfg.train.second_order, k);
                else if (k == "enable_cls") assign(v, cfg.train.enable_cls, k);
                else if (k == "enable_trp") assign(v, cfg.train.enable_trp, k);
                else if (k == "enable_cdt") assign(v, cfg.train.enable_cdt, k);
                else if (k == "cov_grad") assign(v, cfg.train.cov_grad, k);
                else if (k == "checkpoint_every") assign(v, cfg.train.checkpoint_every, k);
                else if (k == "lmcl_form") cfg.train.lmcl_form = parse_lmcl_form(v.get<std::string>());
                else throw cdml::ContractError("config: unknown key 'train." + k + "'");
            }
        } else if (key == "loss") {
            for (const auto& [k, v] : value.items()) {
                if (k == "tau") assign(v, cfg.loss.tau, k);
                else if (k == "rho") assign(v, cfg.loss.rho, k);
                else if (k == "margin_m") assign(v, cfg.loss.m, k);
                else if (k == "scale_s") assign(v, cfg.loss.s, k);
                else throw cdml::ContractError("config: unknown key 'loss." + k + "'");
            }
        } else if (key == "eval") {
            for (const auto& [k, v] : value.items()) {
                if (k == "far_levels") assign(v, cfg.eval.far_levels, k);
                else if (k == "pairs_per_split") assign(v, cfg.eval.pairs_per_split, k);
                else if (k == "identification_eval_fraction")
                    assign(v, cfg.eval.identification_eval_fraction, k);
                else throw cdml::ContractError("config: unknown key 'eval." + k + "'");
            }
        } else {
            throw cdml::ContractError("config: unknown key '" + key + "'");
        }
    }
}

// Flag values sit in optionals so config-file values survive unset flags.
struct FlagOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<double> lambda, alpha, beta, tau, rho, margin_m, scale_s;
    std::optional<std::size_t> batch;
    bool second_order = false, no_cls = false, no_trp = false, no_cdt = false, cov_grad = false;
    std::string lmcl_form;
    std::string far_levels;

    void apply(RunConfig& cfg) const {
        if (seed) cfg.seed = *seed;
        if (steps) cfg.train.steps = *steps;
        if (lambda) cfg.train.lambda = *lambda;
        if (alpha) cfg.train.alpha = *alpha;
        if (beta) cfg.train.beta = *beta;
        if (batch) cfg.train.batch = *batch;
        if (tau) cfg.loss.tau = *tau;
        if (rho) cfg.loss.rho = *rho;
        if (margin_m) cfg.loss.m = *margin_m;
        if (scale_s) cfg.loss.s = *scale_s;
        if (second_order) cfg.train.second_order = true;
        if (no_cls) cfg.train.enable_cls = false;
        if (no_trp) cfg.train.enable_trp = false;
        if (no_cdt) cfg.train.enable_cdt = false;
        if (cov_grad) cfg.train.cov_grad = true;
        if (!lmcl_form.empty()) cfg.train.lmcl_form = parse_lmcl_form(lmcl_form);
        if (!far_levels.empty()) cfg.eval.far_levels = parse_double_list(far_levels, "far level");
    }
};

RunConfig resolve_config(const std::string& config_path, const FlagOverrides& flags) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw cdml::IoError("cannot read config: " + config_path);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw cdml::ParseError("config: " + std::string(e.what()));
        }
        apply_config_json(cfg, j);
    }
    flags.apply(cfg);
    cfg.data.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    cfg.loss.validate();
    cfg.train.validate();
    return cfg;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw cdml::IoError("cannot write: " + path);
    out << content;
    if (!out) throw cdml::IoError("failed writing: " + path);
}

void write_config_echo(const RunConfig& cfg, const json& context, const std::string& path) {
    json j = config_to_json(cfg);
    j["invocation"] = context;
    write_text(path, j.dump(2) + "\n");
}

std::size_t dataset_input_dim(const std::vector<cdml::DomainDataset>& domains) {
    for (const auto& ds : domains) {
        if (!ds.samples.empty()) return ds.samples.front().x.size();
    }
    throw cdml::ContractError("dataset holds no samples");
}

cdml::TrainerSetup make_setup(const RunConfig& cfg, std::size_t input_dim) {
    cdml::TrainerSetup setup;
    setup.train = cfg.train;
    setup.loss = cfg.loss;
    setup.model = cfg.model;
    setup.model.input_dim = input_dim;
    return setup;
}

void print_report(const cdml::EvalReport& report) {
    std::printf("held-out domain %d\n", report.held_out_domain);
    std::printf("  %-12s %s\n", "FAR", "TAR");
    for (const auto& [level, tar] : report.tar_at_far) {
        std::printf("  %-12g %.4f\n", level, tar);
    }
    std::printf("  rank-1          %.4f\n", report.rank1);
    std::printf("  AUC             %.4f\n", report.auc);
    std::printf("  verification    %.4f +/- %.4f\n", report.verification_mean,
                report.verification_std);
    std::printf("  identification  %.4f\n", report.identification_accuracy);
}

// ---- subcommands -----------------------------------------------------------

int cmd_synth(const RunConfig& cfg, const std::string& out_path, bool binary) {
    auto domains = cdml::generate(cfg.data);
    cdml::store_datasets(domains, out_path,
                         binary ? cdml::DatasetFormat::binary : cdml::DatasetFormat::text);
    write_config_echo(cfg, {{"command", "synth"}, {"out", out_path}, {"binary", binary}},
                      out_path + ".config.json");
    std::size_t total = 0;
    for (const auto& ds : domains) total += ds.samples.size();
    std::printf("wrote %zu domains, %zu identities/domain, %zu samples/identity (%zu samples) -> %s\n",
                domains.size(), cfg.data.identities_per_domain, cfg.data.samples_per_identity,
                total, out_path.c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir) {
    auto domains = cdml::load_datasets(data_path);
    auto setup = make_setup(cfg, dataset_input_dim(domains));

    fs::create_directories(out_dir);
    cdml::CheckpointHook hook = [&](std::size_t step, const cdml::ModelParams& params) {
        cdml::save_checkpoint(params, out_dir + "/checkpoint_step" + std::to_string(step) + ".json");
    };
    auto result = cdml::train(domains, setup, hook);

    cdml::save_checkpoint(result.params, out_dir + "/checkpoint.json");
    std::ostringstream trace;
    for (const auto& t : result.traces) trace << t.to_jsonl() << '\n';
    write_text(out_dir + "/trace.jsonl", trace.str());
    if (result.sigma_pos && result.sigma_neg) {
        // Final-step pairwise-difference metrics, for offline inspection.
        write_text(out_dir + "/covariances.json",
                   "{\"positive\": " + result.sigma_pos->to_json_string() +
                       ", \"negative\": " + result.sigma_neg->to_json_string() + "}\n");
    }
    write_config_echo(cfg, {{"command", "train"}, {"data", data_path}, {"out", out_dir}},
                      out_dir + "/config.json");

    double tail_ls = 0.0;
    const std::size_t per_step = domains.size() * (domains.size() - 1);
    const std::size_t tail = std::min<std::size_t>(result.traces.size(), per_step);
    for (std::size_t i = result.traces.size() - tail; i < result.traces.size(); ++i) {
        tail_ls += result.traces[i].loss_s;
    }
    std::printf("trained %zu steps on %zu domains; final-step mean L_s %.4f -> %s\n",
                cfg.train.steps, domains.size(), tail ? tail_ls / tail : 0.0, out_dir.c_str());
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, const std::string& data_path,
             int held_out, const std::string& report_path, const std::string& roc_csv_path) {
    auto params = cdml::load_checkpoint(checkpoint_path);
    auto domains = cdml::load_datasets(data_path);
    const std::size_t dim = dataset_input_dim(domains);
    if (dim != params.config.input_dim) {
        throw cdml::DimensionError("checkpoint expects input_dim " +
                                   std::to_string(params.config.input_dim) + ", dataset has " +
                                   std::to_string(dim));
    }
    const cdml::DomainDataset* held = nullptr;
    for (const auto& ds : domains) {
        if (ds.domain_id == held_out) held = &ds;
    }
    if (held == nullptr) {
        throw cdml::ContractError("no domain with id " + std::to_string(held_out) + " in " +
                                  data_path);
    }

    cdml::RocCurve curve;
    auto report = cdml::evaluate_domain(params, *held, cfg.eval, &curve);
    cdml::save_report(report, report_path);
    if (!roc_csv_path.empty()) write_text(roc_csv_path, cdml::roc_to_csv(curve));
    write_config_echo(cfg,
                      {{"command", "eval"},
                       {"checkpoint", checkpoint_path},
                       {"data", data_path},
                       {"held_out", held_out},
                       {"report", report_path}},
                      report_path + ".config.json");
    print_report(report);
    return 0;
}

int cmd_lodo(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir,
             const std::string& sweep_lambda) {
    auto domains = cdml::load_datasets(data_path);
    const std::size_t input_dim = dataset_input_dim(domains);
    fs::create_directories(out_dir);

    std::vector<double> lambdas{cfg.train.lambda};
    if (!sweep_lambda.empty()) lambdas = parse_double_list(sweep_lambda, "lambda");

    json summary = json::array();
    std::size_t run_index = 0;
    for (double lambda : lambdas) {
        for (const auto& ds : domains) {
            RunConfig run_cfg = cfg;
            run_cfg.train.lambda = lambda;
            run_cfg.train.seed = cdml::derive_seed(cfg.seed, run_index);
            run_cfg.eval.seed = cdml::derive_seed(cfg.seed, run_index);
            ++run_index;

            auto setup = make_setup(run_cfg, input_dim);
            cdml::TrainFn train_fn = [&](const std::vector<cdml::DomainDataset>& training) {
                return cdml::train(training, setup).params;
            };
            auto report =
                cdml::leave_one_domain_out(domains, ds.domain_id, train_fn, run_cfg.eval);

            char name[128];
            if (lambdas.size() > 1) {
                std::snprintf(name, sizeof(name), "report_heldout%d_lambda%g.json", ds.domain_id,
                              lambda);
            } else {
                std::snprintf(name, sizeof(name), "report_heldout%d.json", ds.domain_id);
            }
            cdml::save_report(report, out_dir + "/" + name);

            json row;
            row["lambda"] = lambda;
            row["held_out_domain"] = report.held_out_domain;
            row["report_file"] = name;
            for (const auto& [level, tar] : report.tar_at_far) {
                char key[32];
                std::snprintf(key, sizeof(key), "tar@%g", level);
                row[key] = tar;
            }
            row["rank1"] = report.rank1;
            row["auc"] = report.auc;
            row["verification_mean"] = report.verification_mean;
            row["identification_accuracy"] = report.identification_accuracy;
            summary.push_back(row);

            std::printf("lambda %g, ", lambda);
            print_report(report);
        }
    }
    write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
    write_config_echo(cfg,
                      {{"command", "lodo"},
                       {"data", data_path},
                       {"out", out_dir},
                       {"sweep_lambda", sweep_lambda}},
                      out_dir + "/config.json");
    std::printf("wrote %zu reports -> %s\n", summary.size(), out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-domain similarity learning engine"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, checkpoint_path, roc_csv_path, sweep_lambda;
    int held_out = -1;
    bool binary = false;
    FlagOverrides flags;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", flags.seed, "master seed");
        sub->add_option("--steps", flags.steps, "outer training steps");
        sub->add_option("--lambda", flags.lambda, "L_s/L_t mix in [0,1]");
        sub->add_option("--alpha", flags.alpha, "inner learning rate");
        sub->add_option("--beta", flags.beta, "outer learning rate");
        sub->add_option("--batch", flags.batch, "triplets per batch");
        sub->add_option("--tau", flags.tau, "cross-domain triplet margin");
        sub->add_option("--rho", flags.rho, "triplet margin");
        sub->add_option("--margin-m", flags.margin_m, "classifier margin");
        sub->add_option("--scale-s", flags.scale_s, "classifier cosine scale");
        sub->add_flag("--second-order", flags.second_order, "exact gradients through the inner step");
        sub->add_flag("--no-cls", flags.no_cls, "disable the classification loss");
        sub->add_flag("--no-trp", flags.no_trp, "disable the triplet loss");
        sub->add_flag("--no-cdt", flags.no_cdt, "disable the cross-domain triplet loss");
        sub->add_flag("--cov-grad", flags.cov_grad, "backpropagate through the covariances");
        sub->add_option("--lmcl-form", flags.lmcl_form, "classifier margin form: paper|cosface")
            ->check(CLI::IsMember({"paper", "cosface"}));
        sub->add_option("--far-levels", flags.far_levels, "comma-separated FAR levels");
    };

    auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain dataset");
    add_common(synth);
    synth->add_option("--out", out_path, "output dataset path")->required();
    synth->add_flag("--binary", binary, "write the binary dataset format");

    auto* train_cmd = app.add_subcommand("train", "train on every domain in a dataset");
    add_common(train_cmd);
    train_cmd->add_option("--data", data_path, "dataset path")->required();
    train_cmd->add_option("--out", out_path, "output directory")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one domain");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
    eval_cmd->add_option("--data", data_path, "dataset path")->required();
    eval_cmd->add_option("--held-out", held_out, "held-out domain id")->required();
    eval_cmd->add_option("--out", out_path, "report output path")->required();
    eval_cmd->add_option("--roc-csv", roc_csv_path, "optional ROC curve CSV path");

    auto* lodo = app.add_subcommand("lodo", "leave-one-domain-out over every domain");
    add_common(lodo);
    lodo->add_option("--data", data_path, "dataset path")->required();
    lodo->add_option("--out", out_path, "output directory")->required();
    lodo->add_option("--sweep-lambda", sweep_lambda, "comma-separated lambda grid");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = resolve_config(config_path, flags);
        if (synth->parsed()) return cmd_synth(cfg, out_path, binary);
        if (train_cmd->parsed()) return cmd_train(cfg, data_path, out_path);
        if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint_path, data_path, held_out, out_path,
                                                roc_csv_path);
        if (lodo->parsed()) return cmd_lodo(cfg, data_path, out_path, sweep_lambda);
        std::fprintf(stderr, "error: no subcommand\n");
        return 2;
    } catch (const cdml::NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 3;
    } catch (const cdml::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
