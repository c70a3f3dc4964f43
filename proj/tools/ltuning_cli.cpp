// Command-line front end: backbone init, synthetic data generation, adapter
// training, evaluation, parameter audit, gradient verification, and the
// convergence comparison harness.
//
// Exit codes: 0 success, 1 usage/config error, 2 I/O or data error,
// 3 check or verification failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ltuning/ltuning.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitCheckFailed = 3;

struct BackboneOpts {
    std::int64_t d = 64;
    std::int64_t layers = 4;
    std::int64_t heads = 4;
    std::int64_t vocab = 512;
    std::int64_t max_seq = 128;
    std::uint64_t seed = 1;

    ltuning::BackboneConfig to_config() const {
        ltuning::BackboneConfig cfg;
        cfg.d = d;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.vocab = vocab;
        cfg.max_seq = max_seq;
        cfg.seed = seed;
        return cfg;
    }
};

struct AdapterOpts {
    std::string method = "lt-prefix";
    std::int64_t l = 8;
    std::int64_t p_len = 0;  // 0 = auto
    std::string pooling = "weights";

    ltuning::AdapterConfig to_config() const {
        ltuning::AdapterConfig cfg;
        cfg.method = ltuning::parse_method(method);
        cfg.l = l;
        cfg.p_len = p_len;
        cfg.pooling = ltuning::parse_pooling(pooling);
        return cfg;
    }
};

struct TrainOpts {
    std::int64_t steps = 500;
    std::int64_t batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 42;
    std::int64_t eval_every = 10;
    double threshold = 0.3;
    std::int64_t val_metric_items = 64;

    ltuning::TrainConfig to_config() const {
        ltuning::TrainConfig cfg;
        cfg.steps = steps;
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.eval_every = eval_every;
        cfg.loss_threshold = threshold;
        cfg.val_metric_items = val_metric_items;
        return cfg;
    }
};

void add_backbone_opts(CLI::App* cmd, BackboneOpts& o) {
    cmd->add_option("--backbone.d", o.d, "model dimension")->capture_default_str();
    cmd->add_option("--backbone.layers", o.layers, "transformer layers")->capture_default_str();
    cmd->add_option("--backbone.heads", o.heads, "attention heads")->capture_default_str();
    cmd->add_option("--backbone.vocab", o.vocab, "vocabulary size")->capture_default_str();
    cmd->add_option("--backbone.max_seq", o.max_seq, "maximum sequence length")
        ->capture_default_str();
    cmd->add_option("--backbone.seed", o.seed, "weight init seed")->capture_default_str();
}

void add_adapter_opts(CLI::App* cmd, AdapterOpts& o, bool with_method_alias) {
    auto* method = cmd->add_option("--adapter.method", o.method,
                                   "tuning method: lt-prefix|lt-prompt|prefix|prompt");
    method->capture_default_str();
    if (with_method_alias) method->group("Options");
    cmd->add_option("--adapter.l", o.l, "padded label / soft prompt length")->capture_default_str();
    cmd->add_option("--adapter.p_len", o.p_len, "prefix length (0 = auto)")->capture_default_str();
    cmd->add_option("--adapter.pooling", o.pooling, "lt-prefix pooling mode: weights|sum")
        ->capture_default_str();
}

void add_train_opts(CLI::App* cmd, TrainOpts& o) {
    cmd->add_option("--train.steps", o.steps, "optimization steps")->capture_default_str();
    cmd->add_option("--train.batch", o.batch, "batch size (even)")->capture_default_str();
    cmd->add_option("--train.lr", o.lr, "Adam learning rate")->capture_default_str();
    cmd->add_option("--train.seed", o.seed, "training seed")->capture_default_str();
    cmd->add_option("--train.eval_every", o.eval_every, "validation interval in steps (0 = off)")
        ->capture_default_str();
    cmd->add_option("--train.threshold", o.threshold, "loss threshold for early reporting")
        ->capture_default_str();
    cmd->add_option("--train.val_metric_items", o.val_metric_items,
                    "cap on periodic validation items (0 = full split)")
        ->capture_default_str();
}

void enable_config(CLI::App* cmd) {
    cmd->set_config("--config", "", "TOML config file (sections backbone/adapter/train)");
    cmd->allow_config_extras(CLI::config_extras_mode::ignore_all);
}

json effective_config_json(const BackboneOpts* b, const AdapterOpts* a, const TrainOpts* t) {
    json j;
    if (b) {
        j["backbone"] = {{"d", b->d},         {"layers", b->layers},   {"heads", b->heads},
                         {"vocab", b->vocab}, {"max_seq", b->max_seq}, {"seed", b->seed}};
    }
    if (a) {
        j["adapter"] = {{"method", a->method},
                        {"l", a->l},
                        {"p_len", a->p_len},
                        {"pooling", a->pooling}};
    }
    if (t) {
        j["train"] = {{"steps", t->steps},
                      {"batch", t->batch},
                      {"lr", t->lr},
                      {"seed", t->seed},
                      {"eval_every", t->eval_every},
                      {"threshold", t->threshold},
                      {"val_metric_items", t->val_metric_items}};
    }
    return j;
}

void echo_config(const json& j) { std::cerr << "config: " << j.dump() << std::endl; }

struct LoadedTask {
    ltuning::Backbone backbone;
    ltuning::Tokenizer tokenizer;
    ltuning::Dataset dataset;
};

LoadedTask load_task(const std::string& backbone_path, const std::string& data_dir) {
    LoadedTask task{ltuning::load_backbone(backbone_path),
                    ltuning::Tokenizer::load((fs::path(data_dir) / "vocab.txt").string()),
                    ltuning::load_dataset_dir(data_dir)};
    if (task.tokenizer.size() > task.backbone.config().vocab) {
        throw ltuning::ConfigError("vocabulary of " + std::to_string(task.tokenizer.size()) +
                                   " words exceeds backbone vocab " +
                                   std::to_string(task.backbone.config().vocab));
    }
    return task;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int run_init_backbone(const BackboneOpts& opts, const std::string& out_path) {
    echo_config(effective_config_json(&opts, nullptr, nullptr));
    const auto backbone = ltuning::Backbone::init(opts.to_config());
    ltuning::save_backbone(out_path, backbone);
    json out;
    out["path"] = out_path;
    out["checksum"] = backbone.checksum();
    out["param_count"] = backbone.param_count();
    std::cout << out.dump() << std::endl;
    return kExitOk;
}

int run_gen_data(int classes, int n_train, int n_val, std::uint64_t seed,
                 std::int64_t vocab_budget, const std::string& out_dir) {
    ltuning::SynthSpec spec;
    spec.classes = classes;
    spec.seed = seed;
    spec.vocab_budget = vocab_budget;
    const auto data = ltuning::gen_synth(spec, n_train, n_val);
    ltuning::write_dataset_dir(data, out_dir);
    json out;
    out["dir"] = out_dir;
    out["classes"] = classes;
    out["train"] = data.dataset.train.size();
    out["val"] = data.dataset.val.size();
    out["vocab_words"] = data.vocab_words.size() + 2;
    std::cout << out.dump() << std::endl;
    return kExitOk;
}

int run_train(const AdapterOpts& aopts, const TrainOpts& topts, const std::string& backbone_path,
              const std::string& data_dir, const std::string& out_path,
              const std::string& metrics_path) {
    echo_config(effective_config_json(nullptr, &aopts, &topts));
    const auto task = load_task(backbone_path, data_dir);
    const auto labels =
        ltuning::LabelSet::build(task.tokenizer, task.dataset.labels, aopts.to_config().l);
    const auto before = task.backbone.checksum();
    const auto result =
        ltuning::train_any(task.backbone, aopts.to_config(), task.dataset.train, task.dataset.val,
                           labels, task.tokenizer, topts.to_config());
    const auto after = task.backbone.checksum();
    if (!out_path.empty()) ltuning::save_adapter(out_path, result.adapter);
    if (!metrics_path.empty()) ltuning::write_metrics_csv(metrics_path, result.metrics);

    json out;
    out["method"] = aopts.method;
    out["steps"] = topts.steps;
    for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
        if (it->split == "train") {
            out["final_train_loss"] = it->loss;
            break;
        }
    }
    for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
        if (it->split == "val") {
            out["final_val_loss"] = it->loss;
            if (it->accuracy) out["final_val_accuracy"] = *it->accuracy;
            break;
        }
    }
    if (result.first_step_at_threshold) {
        out["first_step_at_threshold"] = *result.first_step_at_threshold;
    }
    out["backbone_checksum_before"] = before;
    out["backbone_checksum_after"] = after;
    out["backbone_frozen"] = (before == after);
    if (!out_path.empty()) out["adapter"] = out_path;
    if (!metrics_path.empty()) out["metrics"] = metrics_path;
    std::cout << out.dump() << std::endl;
    return kExitOk;
}

int run_eval(const std::string& backbone_path, const std::string& adapter_path,
             const std::string& data_dir, const std::string& split) {
    const auto task = load_task(backbone_path, data_dir);
    const auto adapter = ltuning::load_adapter(adapter_path);
    const auto& acfg = ltuning::adapter_config(adapter);
    const auto labels = ltuning::LabelSet::build(task.tokenizer, task.dataset.labels, acfg.l);
    const auto* examples = &task.dataset.val;
    if (split == "train") {
        examples = &task.dataset.train;
    } else if (split != "val") {
        throw ltuning::ConfigError("eval: unknown split '" + split + "' (want train|val)");
    }
    const auto report =
        ltuning::evaluate(task.backbone, adapter, labels, task.tokenizer, *examples);
    json out;
    out["accuracy"] = report.accuracy;
    out["n"] = report.n;
    out["per_label_accuracy"] = report.per_label_accuracy;
    std::cout << out.dump() << std::endl;
    return kExitOk;
}

int run_audit(const std::string& method, const BackboneOpts& bopts, const AdapterOpts& aopts,
              std::int64_t classes) {
    ltuning::AdapterConfig cfg = aopts.to_config();
    cfg.method = ltuning::parse_method(method);
    cfg.d = bopts.d;
    cfg.layers = bopts.layers;
    cfg.heads = bopts.heads;
    cfg.num_labels = classes;
    const auto report = ltuning::audit_params<float>(cfg);
    json out;
    out["method"] = method;
    out["expected"] = report.expected;
    out["actual"] = report.actual;
    out["formula"] = report.formula;
    out["match"] = report.match;
    std::cout << out.dump() << std::endl;
    return report.match ? kExitOk : kExitCheckFailed;
}

int run_gradcheck(const std::string& method, const BackboneOpts& bopts, const AdapterOpts& aopts,
                  double step, double tol) {
    echo_config(effective_config_json(&bopts, &aopts, nullptr));
    const auto m = ltuning::parse_method(method);

    // Tiny deterministic task in double precision; adapter parameters
    // (including the normally zero-initialized heads) are randomized so every
    // gradient path is exercised.
    auto backbone = ltuning::BackboneT<double>::init(bopts.to_config());
    ltuning::SynthSpec spec;
    spec.classes = 2;
    spec.seed = 5;
    const auto data = ltuning::gen_synth(spec, 8, 2);
    const auto tokenizer = ltuning::Tokenizer::from_words(data.vocab_words);
    const auto labels = ltuning::LabelSet::build(tokenizer, data.dataset.labels, aopts.l);

    ltuning::AdapterConfig acfg = aopts.to_config();
    acfg.method = m;
    acfg.d = bopts.d;
    acfg.layers = bopts.layers;
    acfg.heads = bopts.heads;
    acfg.num_labels = labels.k();
    acfg.seed = 11;
    auto adapter = ltuning::make_adapter<double>(acfg);
    ltuning::SplitMix64 rng(17);
    for (const auto& p : ltuning::adapter_named_params(adapter)) {
        for (auto& v : p.tensor->data) v = 0.3 * rng.next_normal();
    }

    const auto h_labels = ltuning::detail::encode_labels(backbone, labels);
    std::vector<std::vector<int>> texts;
    std::vector<int> golds;
    for (int i = 0; i < 2; ++i) {
        texts.push_back(ltuning::tokenize_or_unk(tokenizer, data.dataset.train[i].text));
        golds.push_back(data.dataset.train[i].label_index);
    }

    std::function<ltuning::TensorPtrT<double>(ltuning::TapeT<double>&)> loss_fn;
    if (ltuning::is_nli_method(m)) {
        ltuning::NliBatch batch;
        for (int i = 0; i < 2; ++i) {
            ltuning::NliItem item;
            item.text_ids = texts[static_cast<std::size_t>(i)];
            const int label = (i == 0) ? golds[0] : 1 - golds[1];
            item.label_ids = labels.token_ids[static_cast<std::size_t>(label)];
            item.label_mask = labels.valid[static_cast<std::size_t>(label)];
            item.label_index = label;
            item.target = (i == 0) ? 1 : 0;
            batch.items.push_back(std::move(item));
        }
        loss_fn = [&, batch](ltuning::TapeT<double>& tape) {
            return ltuning::batch_loss(tape, backbone, adapter, batch, h_labels);
        };
    } else {
        loss_fn = [&](ltuning::TapeT<double>& tape) {
            std::vector<ltuning::TensorPtrT<double>> rows;
            for (const auto& t : texts) {
                rows.push_back(ltuning::detail::kway_forward(tape, backbone, adapter, t));
            }
            return ltuning::cross_entropy_with_logits(tape, ltuning::stack_rows(tape, rows), golds);
        };
    }

    const auto report =
        ltuning::finite_diff_check<double>(loss_fn, ltuning::adapter_named_params(adapter), step);
    json out;
    out["method"] = method;
    out["step"] = step;
    out["tolerance"] = tol;
    json groups = json::object();
    for (const auto& g : report.groups) groups[g.name] = g.max_rel_err;
    out["max_rel_err_per_group"] = groups;
    out["max_rel_err"] = report.max_rel_err;
    out["pass"] = report.pass(tol);
    std::cout << out.dump() << std::endl;
    return report.pass(tol) ? kExitOk : kExitCheckFailed;
}

int run_compare(const std::string& methods_csv, int n_seeds, double threshold,
                const AdapterOpts& aopts, const TrainOpts& topts, const std::string& backbone_path,
                const std::string& data_dir, const std::string& out_dir, unsigned workers) {
    echo_config(effective_config_json(nullptr, &aopts, &topts));
    std::vector<ltuning::Method> methods;
    std::string token;
    for (std::size_t i = 0; i <= methods_csv.size(); ++i) {
        if (i == methods_csv.size() || methods_csv[i] == ',') {
            if (!token.empty()) methods.push_back(ltuning::parse_method(token));
            token.clear();
        } else {
            token.push_back(methods_csv[i]);
        }
    }
    if (n_seeds < 1) throw ltuning::ConfigError("compare: --seeds must be >= 1");

    const auto task = load_task(backbone_path, data_dir);
    const auto labels = ltuning::LabelSet::build(task.tokenizer, task.dataset.labels, aopts.l);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(topts.seed + static_cast<std::uint64_t>(i));

    const auto outcome = ltuning::compare_convergence(
        task.backbone, methods, task.dataset.train, task.dataset.val, labels, task.tokenizer,
        aopts.to_config(), topts.to_config(), seeds, threshold, workers);

    fs::create_directories(out_dir);
    ltuning::write_curves_csv((fs::path(out_dir) / "curves.csv").string(), outcome.curves);
    ltuning::write_compare_summary((fs::path(out_dir) / "summary.json").string(), outcome);
    std::cout << ltuning::compare_summary_json(outcome).dump() << std::endl;

    for (const auto& run : outcome.runs) {
        if (!run.error.empty()) return kExitCheckFailed;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"L-Tuning: label-conditioned prefix/prompt tuning on a frozen toy transformer"};
    app.require_subcommand(1);

    // init-backbone
    BackboneOpts init_bopts;
    std::string init_out;
    auto* cmd_init = app.add_subcommand("init-backbone", "initialize and save frozen backbone weights");
    add_backbone_opts(cmd_init, init_bopts);
    cmd_init->add_option("--out", init_out, "output weight file")->required();
    enable_config(cmd_init);

    // gen-data
    int gd_classes = 4, gd_train = 2000, gd_val = 400;
    std::uint64_t gd_seed = 1;
    std::int64_t gd_budget = 512;
    std::string gd_out;
    auto* cmd_gen = app.add_subcommand("gen-data", "generate the synthetic keyword task");
    cmd_gen->add_option("--classes", gd_classes, "number of classes")->capture_default_str();
    cmd_gen->add_option("--train", gd_train, "training examples")->capture_default_str();
    cmd_gen->add_option("--val", gd_val, "validation examples")->capture_default_str();
    cmd_gen->add_option("--seed", gd_seed, "generator seed")->capture_default_str();
    cmd_gen->add_option("--vocab-budget", gd_budget, "vocabulary size limit")->capture_default_str();
    cmd_gen->add_option("--out", gd_out, "output directory")->required();

    // train
    AdapterOpts tr_aopts;
    TrainOpts tr_topts;
    std::string tr_backbone, tr_data, tr_out, tr_metrics;
    auto* cmd_train = app.add_subcommand("train", "train an adapter against a frozen backbone");
    cmd_train->add_option("--method", tr_aopts.method,
                          "tuning method: lt-prefix|lt-prompt|prefix|prompt");
    add_adapter_opts(cmd_train, tr_aopts, true);
    add_train_opts(cmd_train, tr_topts);
    cmd_train->add_option("--backbone", tr_backbone, "backbone weight file")->required();
    cmd_train->add_option("--data", tr_data, "dataset directory")->required();
    cmd_train->add_option("--out", tr_out, "adapter output file");
    cmd_train->add_option("--metrics", tr_metrics, "metrics CSV output file");
    enable_config(cmd_train);

    // eval
    std::string ev_backbone, ev_adapter, ev_data, ev_split = "val";
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a trained adapter");
    cmd_eval->add_option("--backbone", ev_backbone, "backbone weight file")->required();
    cmd_eval->add_option("--adapter", ev_adapter, "adapter weight file")->required();
    cmd_eval->add_option("--data", ev_data, "dataset directory")->required();
    cmd_eval->add_option("--split", ev_split, "split to evaluate: train|val")->capture_default_str();

    // audit
    BackboneOpts au_bopts;
    AdapterOpts au_aopts;
    std::string au_method = "lt-prefix";
    std::int64_t au_classes = 2;
    auto* cmd_audit = app.add_subcommand("audit", "compare trainable parameter counts to the closed forms");
    cmd_audit->add_option("--method", au_method, "tuning method")->capture_default_str();
    add_backbone_opts(cmd_audit, au_bopts);
    add_adapter_opts(cmd_audit, au_aopts, false);
    cmd_audit->add_option("--classes", au_classes, "number of labels K")->capture_default_str();
    enable_config(cmd_audit);

    // gradcheck
    BackboneOpts gc_bopts;
    gc_bopts.d = 8;
    gc_bopts.layers = 2;
    gc_bopts.heads = 2;
    gc_bopts.vocab = 64;
    gc_bopts.max_seq = 32;
    AdapterOpts gc_aopts;
    gc_aopts.l = 3;
    std::string gc_method = "lt-prefix";
    double gc_step = 1e-4, gc_tol = 1e-4;
    auto* cmd_gc = app.add_subcommand(
        "gradcheck", "verify adapter gradients against central finite differences (f64)");
    cmd_gc->add_option("--method", gc_method, "tuning method")->capture_default_str();
    add_backbone_opts(cmd_gc, gc_bopts);
    add_adapter_opts(cmd_gc, gc_aopts, false);
    cmd_gc->add_option("--step", gc_step, "finite-difference step")->capture_default_str();
    cmd_gc->add_option("--tol", gc_tol, "max relative error tolerance")->capture_default_str();
    enable_config(cmd_gc);

    // compare
    AdapterOpts cp_aopts;
    TrainOpts cp_topts;
    std::string cp_methods = "prompt,lt-prompt";
    int cp_seeds = 5;
    double cp_threshold = 0.3;
    unsigned cp_workers = std::max(1u, std::thread::hardware_concurrency());
    std::string cp_backbone, cp_data, cp_out;
    auto* cmd_cmp = app.add_subcommand("compare", "convergence comparison across methods and seeds");
    cmd_cmp->add_option("--methods", cp_methods, "comma-separated method list")
        ->capture_default_str();
    cmd_cmp->add_option("--seeds", cp_seeds, "number of seeds (train.seed, train.seed+1, ...)")
        ->capture_default_str();
    cmd_cmp->add_option("--threshold", cp_threshold, "val-loss threshold")->capture_default_str();
    cmd_cmp->add_option("--workers", cp_workers, "parallel training workers")->capture_default_str();
    add_adapter_opts(cmd_cmp, cp_aopts, false);
    add_train_opts(cmd_cmp, cp_topts);
    cmd_cmp->add_option("--backbone", cp_backbone, "backbone weight file")->required();
    cmd_cmp->add_option("--data", cp_data, "dataset directory")->required();
    cmd_cmp->add_option("--out", cp_out, "output directory for curves.csv and summary.json")
        ->required();
    enable_config(cmd_cmp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (cmd_init->parsed()) return run_init_backbone(init_bopts, init_out);
        if (cmd_gen->parsed()) {
            return run_gen_data(gd_classes, gd_train, gd_val, gd_seed, gd_budget, gd_out);
        }
        if (cmd_train->parsed()) {
            return run_train(tr_aopts, tr_topts, tr_backbone, tr_data, tr_out, tr_metrics);
        }
        if (cmd_eval->parsed()) return run_eval(ev_backbone, ev_adapter, ev_data, ev_split);
        if (cmd_audit->parsed()) return run_audit(au_method, au_bopts, au_aopts, au_classes);
        if (cmd_gc->parsed()) return run_gradcheck(gc_method, gc_bopts, gc_aopts, gc_step, gc_tol);
        if (cmd_cmp->parsed()) {
            return run_compare(cp_methods, cp_seeds, cp_threshold, cp_aopts, cp_topts, cp_backbone,
                               cp_data, cp_out, cp_workers);
        }
    } catch (const ltuning::ConfigError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitUsage;
    } catch (const ltuning::TrainError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitCheckFailed;
    } catch (const ltuning::Error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitIo;
    }
    return kExitUsage;
}
