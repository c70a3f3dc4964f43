#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ltuning/adapters.hpp"
#include "ltuning/backbone.hpp"
#include "ltuning/data.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/evaluation.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tensor.hpp"
#include "ltuning/tokenizer.hpp"

namespace ltuning {

// One NLI training item: a text paired with a (possibly false) label and the
// binary target saying whether the pairing is truthful.
struct NliItem {
    std::vector<int> text_ids;
    std::vector<int> label_ids;    // padded to l
    std::vector<char> label_mask;  // 1 where non-pad
    int label_index = 0;           // index of the paired label
    int target = 0;                // 1 iff the paired label is the true one
};

struct NliBatch {
    std::vector<NliItem> items;
};

struct TrainConfig {
    std::int64_t steps = 500;
    std::int64_t batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 42;
    std::int64_t eval_every = 10;        // 0 disables periodic validation
    double loss_threshold = 0.3;         // first train step at or below is reported
    std::int64_t val_metric_items = 64;  // cap on periodic val metrics (0 = full val split)
    bool record_val_accuracy = true;

    void validate() const {
        if (steps < 1) throw ConfigError("train config: steps must be >= 1");
        if (batch < 2 || batch % 2 != 0) {
            throw ConfigError("train config: batch size must be even and >= 2, got " +
                              std::to_string(batch));
        }
        if (!(lr > 0)) throw ConfigError("train config: learning rate must be positive");
        if (eval_every < 0) throw ConfigError("train config: eval_every must be >= 0");
        if (val_metric_items < 0) throw ConfigError("train config: val_metric_items must be >= 0");
    }
};

struct MetricRecord {
    std::int64_t step = 0;
    std::string split;  // "train" or "val"
    double loss = 0.0;
    std::optional<double> accuracy;
};

template <class T>
struct TrainResultT {
    AnyAdapterT<T> adapter;
    std::vector<MetricRecord> metrics;
    std::optional<std::int64_t> first_step_at_threshold;  // train loss <= loss_threshold
};

using TrainResult = TrainResultT<float>;

// ---------------------------------------------------------------------------
// Batch construction: b/2 positives (true label, c=1) and b/2 negatives
// (uniform random label != true label, c=0), sampled with replacement and
// shuffled.
// ---------------------------------------------------------------------------
inline NliBatch build_nli_batch(const std::vector<std::vector<int>>& texts,
                                const std::vector<int>& golds, const LabelSet& labels,
                                std::int64_t b, SplitMix64& rng) {
    if (b < 2 || b % 2 != 0) {
        throw ConfigError("build_nli_batch: batch size must be even and >= 2, got " +
                          std::to_string(b));
    }
    const int k = labels.k();
    if (k < 2) throw ConfigError("build_nli_batch: need K >= 2 labels");
    if (texts.empty()) throw ConfigError("build_nli_batch: empty dataset");

    NliBatch batch;
    batch.items.reserve(static_cast<std::size_t>(b));
    auto push_item = [&](std::size_t ex, int label_index, int target) {
        NliItem item;
        item.text_ids = texts[ex];
        item.label_ids = labels.token_ids[static_cast<std::size_t>(label_index)];
        item.label_mask = labels.valid[static_cast<std::size_t>(label_index)];
        item.label_index = label_index;
        item.target = target;
        batch.items.push_back(std::move(item));
    };
    for (std::int64_t i = 0; i < b / 2; ++i) {
        const auto ex = static_cast<std::size_t>(rng.next_below(texts.size()));
        push_item(ex, golds[ex], 1);
    }
    for (std::int64_t i = 0; i < b / 2; ++i) {
        const auto ex = static_cast<std::size_t>(rng.next_below(texts.size()));
        const int gold = golds[ex];
        const int offset = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k - 1)));
        const int wrong = offset >= gold ? offset + 1 : offset;
        push_item(ex, wrong, 0);
    }
    for (std::size_t i = batch.items.size(); i > 1; --i) {
        std::swap(batch.items[i - 1], batch.items[rng.next_below(i)]);
    }
    return batch;
}

inline NliBatch build_nli_batch(const std::vector<Example>& data, const LabelSet& labels,
                                const Tokenizer& tokenizer, std::int64_t b, SplitMix64& rng) {
    std::vector<std::vector<int>> texts;
    std::vector<int> golds;
    texts.reserve(data.size());
    golds.reserve(data.size());
    for (const auto& ex : data) {
        texts.push_back(tokenize_or_unk(tokenizer, ex.text));
        golds.push_back(ex.label_index);
    }
    return build_nli_batch(texts, golds, labels, b, rng);
}

namespace detail {

// Frozen label encodings; computed once per run and reused as constants.
template <class T>
std::vector<TensorPtrT<T>> encode_labels(const BackboneT<T>& backbone, const LabelSet& labels) {
    std::vector<TensorPtrT<T>> out;
    out.reserve(labels.token_ids.size());
    for (const auto& ids : labels.token_ids) {
        TapeT<T> tape;  // records nothing: every input is frozen
        out.push_back(backbone.encode(tape, ids));
    }
    return out;
}

}  // namespace detail

// Mean binary cross-entropy of the 2-way logits over an NLI batch, with the
// per-label frozen encodings supplied by the caller.
template <class T>
TensorPtrT<T> batch_loss(TapeT<T>& tape, const BackboneT<T>& backbone,
                         const AnyAdapterT<T>& adapter, const NliBatch& batch,
                         const std::vector<TensorPtrT<T>>& h_labels) {
    std::vector<TensorPtrT<T>> rows;
    std::vector<int> targets;
    rows.reserve(batch.items.size());
    targets.reserve(batch.items.size());
    for (const auto& item : batch.items) {
        const auto& h = h_labels.at(static_cast<std::size_t>(item.label_index));
        if (const auto* a = std::get_if<PrefixAdapterT<T>>(&adapter)) {
            rows.push_back(
                prefix_forward_cached(tape, backbone, *a, h, item.label_mask, item.text_ids));
        } else if (const auto* a2 = std::get_if<PromptAdapterT<T>>(&adapter)) {
            rows.push_back(prompt_forward_cached(tape, backbone, *a2, h, item.text_ids));
        } else {
            throw ConfigError("batch_loss: adapter method must be lt-prefix or lt-prompt");
        }
        targets.push_back(item.target);
    }
    return bce_with_logits(tape, stack_rows(tape, rows), targets);
}

template <class T>
TensorPtrT<T> batch_loss(TapeT<T>& tape, const BackboneT<T>& backbone,
                         const AnyAdapterT<T>& adapter, const NliBatch& batch,
                         const LabelSet& labels) {
    return batch_loss(tape, backbone, adapter, batch, detail::encode_labels(backbone, labels));
}

namespace detail {

struct TokenizedSplit {
    std::vector<std::vector<int>> texts;
    std::vector<int> golds;
};

inline TokenizedSplit tokenize_split(const std::vector<Example>& data, const Tokenizer& tokenizer) {
    TokenizedSplit out;
    out.texts.reserve(data.size());
    out.golds.reserve(data.size());
    for (const auto& ex : data) {
        out.texts.push_back(tokenize_or_unk(tokenizer, ex.text));
        out.golds.push_back(ex.label_index);
    }
    return out;
}

// Fixed half-positive/half-negative pairing of the validation subset used for
// periodic val_loss; built once per run so the metric is comparable across
// steps.
struct ValPairing {
    std::vector<std::size_t> example_index;
    std::vector<int> label_index;
    std::vector<int> target;
};

inline ValPairing make_val_pairing(const TokenizedSplit& val, int k, std::int64_t cap,
                                   std::uint64_t seed) {
    ValPairing out;
    const std::size_t n = (cap > 0 && static_cast<std::size_t>(cap) < val.texts.size())
                              ? static_cast<std::size_t>(cap)
                              : val.texts.size();
    SplitMix64 rng(SplitMix64(seed).fork(0x7A1D).next_u64());
    for (std::size_t i = 0; i < n; ++i) {
        const int gold = val.golds[i];
        const int target = static_cast<int>(i % 2);
        int label = gold;
        if (target == 0) {
            const int offset = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k - 1)));
            label = offset >= gold ? offset + 1 : offset;
        }
        out.example_index.push_back(i);
        out.label_index.push_back(label);
        out.target.push_back(target);
    }
    return out;
}

template <class T>
TensorPtrT<T> kway_forward(TapeT<T>& tape, const BackboneT<T>& backbone,
                           const AnyAdapterT<T>& adapter, std::span<const int> text_ids) {
    if (const auto* a = std::get_if<BaselinePrefixAdapterT<T>>(&adapter)) {
        return baseline_prefix_forward(tape, backbone, *a, text_ids);
    }
    if (const auto* a2 = std::get_if<BaselinePromptAdapterT<T>>(&adapter)) {
        return baseline_prompt_forward(tape, backbone, *a2, text_ids);
    }
    throw ConfigError("kway_forward: adapter is not a baseline method");
}

template <class T>
TrainResultT<T> train_impl(const BackboneT<T>& backbone, const AdapterConfig& adapter_cfg,
                           const std::vector<Example>& train_data,
                           const std::vector<Example>& val_data, const LabelSet& labels,
                           const Tokenizer& tokenizer, const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.empty()) throw ConfigError("train: empty training split");
    const bool need_val = cfg.eval_every > 0;
    if (need_val && val_data.empty()) {
        throw ConfigError("train: validation split is empty but eval_every > 0");
    }

    // Adapter dims follow the backbone and label set; all randomness derives
    // from the training seed.
    AdapterConfig acfg = adapter_cfg;
    acfg.d = backbone.config().d;
    acfg.layers = backbone.config().layers;
    acfg.heads = backbone.config().heads;
    acfg.l = labels.l;
    acfg.num_labels = labels.k();
    acfg.seed = SplitMix64(cfg.seed).fork(0xADA7).next_u64();
    AnyAdapterT<T> adapter = make_adapter<T>(acfg);
    const bool nli = is_nli_method(acfg.method);

    const auto h_labels = encode_labels(backbone, labels);
    const auto train_tok = tokenize_split(train_data, tokenizer);
    const auto val_tok = tokenize_split(val_data, tokenizer);
    ValPairing pairing;
    std::size_t val_subset = 0;
    if (need_val) {
        val_subset = (cfg.val_metric_items > 0 &&
                      static_cast<std::size_t>(cfg.val_metric_items) < val_tok.texts.size())
                         ? static_cast<std::size_t>(cfg.val_metric_items)
                         : val_tok.texts.size();
        if (nli) pairing = make_val_pairing(val_tok, labels.k(), cfg.val_metric_items, cfg.seed);
    }

    AdamHyperparams<T> hp;
    hp.lr = static_cast<T>(cfg.lr);
    AdamT<T> adam(adapter_named_params(adapter), hp);
    SplitMix64 batch_rng(SplitMix64(cfg.seed).fork(0xBA7C).next_u64());

    std::vector<MetricRecord> metrics;
    std::optional<std::int64_t> first_at_threshold;

    for (std::int64_t step = 1; step <= cfg.steps; ++step) {
        double train_loss = 0;
        {
            TapeT<T> tape;
            TensorPtrT<T> loss;
            if (nli) {
                const NliBatch batch =
                    build_nli_batch(train_tok.texts, train_tok.golds, labels, cfg.batch, batch_rng);
                loss = batch_loss(tape, backbone, adapter, batch, h_labels);
            } else {
                std::vector<TensorPtrT<T>> rows;
                std::vector<int> targets;
                for (std::int64_t i = 0; i < cfg.batch; ++i) {
                    const auto ex =
                        static_cast<std::size_t>(batch_rng.next_below(train_tok.texts.size()));
                    rows.push_back(kway_forward(tape, backbone, adapter, train_tok.texts[ex]));
                    targets.push_back(train_tok.golds[ex]);
                }
                loss = cross_entropy_with_logits(tape, stack_rows(tape, rows), targets);
            }
            train_loss = static_cast<double>(loss->data[0]);
            if (!std::isfinite(train_loss)) {
                throw TrainError("training diverged at step " + std::to_string(step) +
                                 " (non-finite loss)");
            }
            tape.backward(loss);
        }
        adam.step();
        metrics.push_back({step, "train", train_loss, std::nullopt});
        if (!first_at_threshold && train_loss <= cfg.loss_threshold) {
            first_at_threshold = step;
        }

        if (need_val && step % cfg.eval_every == 0) {
            MetricRecord rec;
            rec.step = step;
            rec.split = "val";
            if (nli) {
                TapeT<T> tape;
                std::vector<TensorPtrT<T>> rows;
                for (std::size_t i = 0; i < pairing.example_index.size(); ++i) {
                    const auto& text = val_tok.texts[pairing.example_index[i]];
                    const int li = pairing.label_index[i];
                    const auto& h = h_labels[static_cast<std::size_t>(li)];
                    const auto& mask = labels.valid[static_cast<std::size_t>(li)];
                    if (const auto* a = std::get_if<PrefixAdapterT<T>>(&adapter)) {
                        rows.push_back(prefix_forward_cached(tape, backbone, *a, h, mask, text));
                    } else {
                        rows.push_back(prompt_forward_cached(
                            tape, backbone, std::get<PromptAdapterT<T>>(adapter), h, text));
                    }
                }
                auto loss = bce_with_logits(tape, stack_rows(tape, rows), pairing.target);
                rec.loss = static_cast<double>(loss->data[0]);
                if (cfg.record_val_accuracy) {
                    NliScorerT<T> scorer(backbone, adapter, labels);
                    std::vector<int> preds, golds;
                    for (std::size_t i = 0; i < val_subset; ++i) {
                        preds.push_back(scorer.predict(val_tok.texts[i]).index);
                        golds.push_back(val_tok.golds[i]);
                    }
                    rec.accuracy = accuracy(preds, golds);
                }
            } else {
                TapeT<T> tape;
                std::vector<TensorPtrT<T>> rows;
                std::vector<int> targets;
                std::vector<int> preds;
                for (std::size_t i = 0; i < val_subset; ++i) {
                    auto logits = kway_forward(tape, backbone, adapter, val_tok.texts[i]);
                    std::vector<double> scores(logits->data.begin(), logits->data.end());
                    preds.push_back(argmax_tie_lowest(scores));
                    rows.push_back(std::move(logits));
                    targets.push_back(val_tok.golds[i]);
                }
                auto loss = cross_entropy_with_logits(tape, stack_rows(tape, rows), targets);
                rec.loss = static_cast<double>(loss->data[0]);
                if (cfg.record_val_accuracy) {
                    rec.accuracy = accuracy(preds, std::span<const int>(targets));
                }
            }
            metrics.push_back(std::move(rec));
        }
    }

    return TrainResultT<T>{std::move(adapter), std::move(metrics), first_at_threshold};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training entry points. `train` runs the two L-Tuning variants against the
// NLI objective; `train_baseline` runs traditional prefix/prompt tuning with
// the K-way objective; `train_any` dispatches on the configured method.
// ---------------------------------------------------------------------------

template <class T>
TrainResultT<T> train(const BackboneT<T>& backbone, const AdapterConfig& adapter_cfg,
                      const std::vector<Example>& train_data, const std::vector<Example>& val_data,
                      const LabelSet& labels, const Tokenizer& tokenizer, const TrainConfig& cfg) {
    if (!is_nli_method(adapter_cfg.method)) {
        throw ConfigError("train: method must be lt-prefix or lt-prompt; use train_baseline for " +
                          method_name(adapter_cfg.method));
    }
    return detail::train_impl(backbone, adapter_cfg, train_data, val_data, labels, tokenizer, cfg);
}

template <class T>
TrainResultT<T> train_baseline(const BackboneT<T>& backbone, const AdapterConfig& adapter_cfg,
                               const std::vector<Example>& train_data,
                               const std::vector<Example>& val_data, const LabelSet& labels,
                               const Tokenizer& tokenizer, const TrainConfig& cfg) {
    if (is_nli_method(adapter_cfg.method)) {
        throw ConfigError("train_baseline: method must be prefix or prompt; use train for " +
                          method_name(adapter_cfg.method));
    }
    return detail::train_impl(backbone, adapter_cfg, train_data, val_data, labels, tokenizer, cfg);
}

template <class T>
TrainResultT<T> train_any(const BackboneT<T>& backbone, const AdapterConfig& adapter_cfg,
                          const std::vector<Example>& train_data,
                          const std::vector<Example>& val_data, const LabelSet& labels,
                          const Tokenizer& tokenizer, const TrainConfig& cfg) {
    return is_nli_method(adapter_cfg.method)
               ? train(backbone, adapter_cfg, train_data, val_data, labels, tokenizer, cfg)
               : train_baseline(backbone, adapter_cfg, train_data, val_data, labels, tokenizer,
                                cfg);
}

// ---------------------------------------------------------------------------
// Metrics CSV: header `step,split,loss,accuracy`, one row per record; train
// rows leave the accuracy column empty.
// ---------------------------------------------------------------------------
inline std::string metrics_csv(const std::vector<MetricRecord>& records) {
    std::string out = "step,split,loss,accuracy\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,", static_cast<long long>(r.step),
                      r.split.c_str(), r.loss);
        out += buf;
        if (r.accuracy) {
            std::snprintf(buf, sizeof(buf), "%.6f", *r.accuracy);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write metrics file: " + path);
    out << metrics_csv(records);
}

}  // namespace ltuning
