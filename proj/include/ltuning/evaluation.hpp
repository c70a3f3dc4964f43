#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ltuning/adapters.hpp"
#include "ltuning/backbone.hpp"
#include "ltuning/data.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/tensor.hpp"
#include "ltuning/tokenizer.hpp"

namespace ltuning {

struct Prediction {
    int index = 0;
    std::vector<double> scores;  // one per label
};

// Ties break toward the lowest index.
inline int argmax_tie_lowest(std::span<const double> scores) {
    if (scores.empty()) throw ConfigError("argmax over empty score list");
    int best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

inline double accuracy(std::span<const int> preds, std::span<const int> golds) {
    if (preds.empty()) throw ShapeError("accuracy: empty input");
    if (preds.size() != golds.size()) {
        throw ShapeError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(golds.size()) + " golds");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == golds[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

namespace detail {

template <class T>
std::vector<double> softmax_scores(const TensorPtrT<T>& logits) {
    const std::size_t k = logits->data.size();
    double mx = static_cast<double>(logits->data[0]);
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(logits->data[i]));
    std::vector<double> scores(k);
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) {
        scores[i] = std::exp(static_cast<double>(logits->data[i]) - mx);
        sum += scores[i];
    }
    for (auto& s : scores) s /= sum;
    return scores;
}

}  // namespace detail

// Scores texts against every label for a fixed adapter. The frozen label
// pathway is computed once at construction: per-label PastKeyValues for
// lt-prefix, per-label transformed embeddings for lt-prompt. Baselines need
// no per-label state (a single forward yields all K logits).
template <class T>
class NliScorerT {
public:
    NliScorerT(const BackboneT<T>& backbone, const AnyAdapterT<T>& adapter, const LabelSet& labels)
        : backbone_(backbone), adapter_(adapter), labels_(labels) {
        if (const auto* a = std::get_if<PrefixAdapterT<T>>(&adapter_)) {
            for (int k = 0; k < labels.k(); ++k) {
                TapeT<T> tape;
                auto h = backbone.encode(tape, labels.token_ids[static_cast<std::size_t>(k)]);
                auto pkv = build_prefix(tape, *a, h, labels.valid[static_cast<std::size_t>(k)]);
                PastKeyValuesT<T> frozen;
                frozen.p_len = pkv.p_len;
                for (const auto& kv : pkv.layers) {
                    frozen.layers.push_back({detach(kv.key), detach(kv.value)});
                }
                pkv_cache_.push_back(std::move(frozen));
            }
        } else if (const auto* a2 = std::get_if<PromptAdapterT<T>>(&adapter_)) {
            for (int k = 0; k < labels.k(); ++k) {
                TapeT<T> tape;
                auto h = backbone.encode(tape, labels.token_ids[static_cast<std::size_t>(k)]);
                label_embed_cache_.push_back(detach(matmul(tape, h, a2->w_gamma)));
            }
        }
    }

    Prediction predict(std::span<const int> text_ids) const {
        std::vector<double> scores;
        if (const auto* a = std::get_if<PrefixAdapterT<T>>(&adapter_)) {
            for (const auto& pkv : pkv_cache_) {
                TapeT<T> tape;
                auto logits = prefix_forward_with_pkv(tape, backbone_, *a, pkv, text_ids);
                scores.push_back(detail::softmax_scores(logits)[1]);  // entailment probability
            }
        } else if (const auto* a2 = std::get_if<PromptAdapterT<T>>(&adapter_)) {
            for (const auto& e_y : label_embed_cache_) {
                TapeT<T> tape;
                auto e_x = backbone_.embed(tape, text_ids);
                auto hs = backbone_.forward_from_embeddings(tape, concat_rows(tape, e_y, e_x));
                auto pooled = take_row(tape, hs, hs->shape[0] - 1);
                auto logits = reshape(tape, matmul(tape, pooled, a2->w_zeta), {2});
                scores.push_back(detail::softmax_scores(logits)[1]);
            }
        } else if (const auto* a3 = std::get_if<BaselinePrefixAdapterT<T>>(&adapter_)) {
            TapeT<T> tape;
            scores = detail::softmax_scores(baseline_prefix_forward(tape, backbone_, *a3, text_ids));
        } else if (const auto* a4 = std::get_if<BaselinePromptAdapterT<T>>(&adapter_)) {
            TapeT<T> tape;
            scores = detail::softmax_scores(baseline_prompt_forward(tape, backbone_, *a4, text_ids));
        }
        Prediction p;
        p.scores = std::move(scores);
        p.index = argmax_tie_lowest(p.scores);
        return p;
    }

private:
    const BackboneT<T>& backbone_;
    AnyAdapterT<T> adapter_;  // shares parameter tensors with the caller's adapter
    LabelSet labels_;
    std::vector<PastKeyValuesT<T>> pkv_cache_;
    std::vector<TensorPtrT<T>> label_embed_cache_;
};

using NliScorer = NliScorerT<float>;

// Single-text prediction with the per-label cache built on the spot. Only
// the NLI methods rescore per label; baselines are rejected here.
template <class T>
Prediction nli_predict(const BackboneT<T>& backbone, const AnyAdapterT<T>& adapter,
                       const Tokenizer& tokenizer, std::string_view text, const LabelSet& labels) {
    if (!is_nli_method(adapter_config(adapter).method)) {
        throw ConfigError("nli_predict: adapter must be lt-prefix or lt-prompt");
    }
    NliScorerT<T> scorer(backbone, adapter, labels);
    return scorer.predict(tokenize_or_unk(tokenizer, text));
}

// Independent rescoring loop: a fresh, uncached forward per label (the label
// tokens are re-encoded every time). Used as the oracle against the cached
// scorer, which must bit-match it.
template <class T>
Prediction nli_predict_uncached(const BackboneT<T>& backbone, const AnyAdapterT<T>& adapter,
                                std::span<const int> text_ids, const LabelSet& labels) {
    Prediction p;
    for (int k = 0; k < labels.k(); ++k) {
        const auto& ids = labels.token_ids[static_cast<std::size_t>(k)];
        const auto& mask = labels.valid[static_cast<std::size_t>(k)];
        TapeT<T> tape;
        TensorPtrT<T> logits;
        if (const auto* a = std::get_if<PrefixAdapterT<T>>(&adapter)) {
            logits = prefix_forward(tape, backbone, *a, ids, mask, text_ids);
        } else if (const auto* a2 = std::get_if<PromptAdapterT<T>>(&adapter)) {
            logits = prompt_forward(tape, backbone, *a2, ids, text_ids);
        } else {
            throw ConfigError("nli_predict_uncached: adapter must be lt-prefix or lt-prompt");
        }
        p.scores.push_back(detail::softmax_scores(logits)[1]);
    }
    p.index = argmax_tie_lowest(p.scores);
    return p;
}

struct EvalReport {
    double accuracy = 0;
    std::int64_t n = 0;
    std::vector<double> per_label_accuracy;
};

template <class T>
EvalReport evaluate(const BackboneT<T>& backbone, const AnyAdapterT<T>& adapter,
                    const LabelSet& labels, const Tokenizer& tokenizer,
                    const std::vector<Example>& examples) {
    if (examples.empty()) throw ConfigError("evaluate: empty example list");
    NliScorerT<T> scorer(backbone, adapter, labels);
    std::vector<std::int64_t> per_label_total(static_cast<std::size_t>(labels.k()), 0);
    std::vector<std::int64_t> per_label_hits(static_cast<std::size_t>(labels.k()), 0);
    std::int64_t hits = 0;
    for (const auto& ex : examples) {
        const auto pred = scorer.predict(tokenize_or_unk(tokenizer, ex.text));
        const auto gold = static_cast<std::size_t>(ex.label_index);
        ++per_label_total[gold];
        if (pred.index == ex.label_index) {
            ++hits;
            ++per_label_hits[gold];
        }
    }
    EvalReport report;
    report.n = static_cast<std::int64_t>(examples.size());
    report.accuracy = static_cast<double>(hits) / static_cast<double>(report.n);
    for (int k = 0; k < labels.k(); ++k) {
        const auto t = per_label_total[static_cast<std::size_t>(k)];
        report.per_label_accuracy.push_back(
            t == 0 ? 0.0
                   : static_cast<double>(per_label_hits[static_cast<std::size_t>(k)]) /
                         static_cast<double>(t));
    }
    return report;
}

}  // namespace ltuning
