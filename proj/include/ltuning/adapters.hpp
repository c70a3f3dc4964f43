#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ltuning/backbone.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tensor.hpp"
#include "ltuning/weights_io.hpp"

namespace ltuning {

enum class Method { lt_prefix, lt_prompt, baseline_prefix, baseline_prompt };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::lt_prefix: return "lt-prefix";
        case Method::lt_prompt: return "lt-prompt";
        case Method::baseline_prefix: return "prefix";
        case Method::baseline_prompt: return "prompt";
    }
    throw ConfigError("unknown method enum value");
}

inline Method parse_method(const std::string& name) {
    if (name == "lt-prefix") return Method::lt_prefix;
    if (name == "lt-prompt") return Method::lt_prompt;
    if (name == "prefix") return Method::baseline_prefix;
    if (name == "prompt") return Method::baseline_prompt;
    throw ConfigError("unknown method '" + name + "' (want lt-prefix|lt-prompt|prefix|prompt)");
}

inline bool is_nli_method(Method m) {
    return m == Method::lt_prefix || m == Method::lt_prompt;
}

// How the label-token hidden states are reduced before the prefix transform.
// `weights`: the transform consumes the l attention weights themselves and
// emits a single prefix slot per layer (p_len == 1), giving exactly
// d + 2*l*layers*d + 2*d trainable parameters. `sum`: the transform consumes
// the pooled d-vector and emits p_len slots per layer.
enum class PoolingMode { weights, sum };

inline std::string pooling_name(PoolingMode m) {
    return m == PoolingMode::weights ? "weights" : "sum";
}

inline PoolingMode parse_pooling(const std::string& name) {
    if (name == "weights") return PoolingMode::weights;
    if (name == "sum") return PoolingMode::sum;
    throw ConfigError("unknown pooling mode '" + name + "' (want weights|sum)");
}

struct AdapterConfig {
    Method method = Method::lt_prefix;
    std::int64_t d = 64;
    std::int64_t l = 8;          // padded label length / soft-prompt length
    std::int64_t layers = 4;     // must match backbone
    std::int64_t heads = 4;      // must match backbone
    std::int64_t num_labels = 2; // K
    std::int64_t p_len = 0;      // 0 = auto (weights: 1, sum: l, baseline prefix: 4)
    PoolingMode pooling = PoolingMode::weights;
    std::uint64_t seed = 7;

    std::int64_t resolved_p_len() const {
        if (p_len > 0) return p_len;
        if (method == Method::lt_prefix) {
            return pooling == PoolingMode::weights ? 1 : l;
        }
        if (method == Method::baseline_prefix) return 4;
        return 0;
    }

    void validate() const {
        if (d <= 0 || l <= 0 || layers <= 0 || heads <= 0 || num_labels < 2) {
            throw ConfigError("adapter config: need positive dims and K >= 2");
        }
        if (d % heads != 0) {
            throw ConfigError("adapter config: d=" + std::to_string(d) +
                              " not divisible by heads=" + std::to_string(heads));
        }
        if (method == Method::lt_prefix && pooling == PoolingMode::weights && p_len > 1) {
            throw ConfigError("adapter config: weights pooling fixes p_len to 1");
        }
        if (p_len < 0) throw ConfigError("adapter config: p_len must be >= 0");
    }

    void check_backbone(const BackboneConfig& bb) const {
        if (d != bb.d || layers != bb.layers || heads != bb.heads) {
            throw ConfigError("adapter dims (d=" + std::to_string(d) + ",layers=" +
                              std::to_string(layers) + ",heads=" + std::to_string(heads) +
                              ") do not match backbone (d=" + std::to_string(bb.d) + ",layers=" +
                              std::to_string(bb.layers) + ",heads=" + std::to_string(bb.heads) + ")");
        }
    }
};

namespace detail {

template <class T>
TensorPtrT<T> normal_param(shape_t shape, SplitMix64& rng, double scale) {
    auto t = make_tensor<T>(std::move(shape), true);
    for (auto& v : t->data) v = static_cast<T>(scale * rng.next_normal());
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// L-Tuning for Prefix: scoring vector (d), prefix transform, 2-way head.
// All maps are bias-free. The classification head starts at zero so the
// initial prediction is uniform (first-step loss == ln 2).
// ---------------------------------------------------------------------------
template <class T>
struct PrefixAdapterT {
    AdapterConfig cfg;
    TensorPtrT<T> w_phi;   // [d]
    TensorPtrT<T> w_psi;   // weights: [l, 2*layers*d]; sum: [d, 2*layers*p_len*d]
    TensorPtrT<T> w_zeta;  // [d, 2]

    static PrefixAdapterT init(const AdapterConfig& cfg) {
        AdapterConfig c = cfg;
        c.method = Method::lt_prefix;
        c.p_len = c.resolved_p_len();
        c.validate();
        SplitMix64 rng(c.seed);
        PrefixAdapterT a;
        a.cfg = c;
        a.w_phi = detail::normal_param<T>({c.d}, rng, 0.02);
        const std::int64_t in_dim = (c.pooling == PoolingMode::weights) ? c.l : c.d;
        a.w_psi = detail::normal_param<T>({in_dim, 2 * c.layers * c.p_len * c.d}, rng, 0.02);
        a.w_zeta = make_tensor<T>({c.d, 2}, true);
        return a;
    }

    std::vector<NamedParam<T>> named_params() const {
        return {{"w_phi", w_phi}, {"w_psi", w_psi}, {"w_zeta", w_zeta}};
    }
};

// L-Tuning for Prompt: d x d label-embedding transform plus the 2-way head,
// d(d+2) trainable parameters. The transform starts at identity so the
// initial label embedding is exactly the frozen label encoding.
template <class T>
struct PromptAdapterT {
    AdapterConfig cfg;
    TensorPtrT<T> w_gamma;  // [d, d]
    TensorPtrT<T> w_zeta;   // [d, 2]

    static PromptAdapterT init(const AdapterConfig& cfg) {
        AdapterConfig c = cfg;
        c.method = Method::lt_prompt;
        c.p_len = 0;
        c.validate();
        PromptAdapterT a;
        a.cfg = c;
        a.w_gamma = make_tensor<T>({c.d, c.d}, true);
        for (std::int64_t i = 0; i < c.d; ++i) a.w_gamma->data[i * c.d + i] = T(1);
        a.w_zeta = make_tensor<T>({c.d, 2}, true);
        return a;
    }

    std::vector<NamedParam<T>> named_params() const {
        return {{"w_gamma", w_gamma}, {"w_zeta", w_zeta}};
    }
};

// Traditional prompt tuning: a free soft-prompt table and a direct K-way head.
template <class T>
struct BaselinePromptAdapterT {
    AdapterConfig cfg;
    TensorPtrT<T> soft_prompt;  // [l, d]
    TensorPtrT<T> head;         // [d, K]

    static BaselinePromptAdapterT init(const AdapterConfig& cfg) {
        AdapterConfig c = cfg;
        c.method = Method::baseline_prompt;
        c.p_len = 0;
        c.validate();
        SplitMix64 rng(c.seed);
        BaselinePromptAdapterT a;
        a.cfg = c;
        a.soft_prompt = detail::normal_param<T>({c.l, c.d}, rng, 0.02);
        a.head = make_tensor<T>({c.d, c.num_labels}, true);
        return a;
    }

    std::vector<NamedParam<T>> named_params() const {
        return {{"soft_prompt", soft_prompt}, {"head", head}};
    }
};

// Traditional prefix tuning: a free per-layer key/value tensor (no
// reparameterization) and a direct K-way head.
template <class T>
struct BaselinePrefixAdapterT {
    AdapterConfig cfg;
    TensorPtrT<T> prefix;  // [layers, 2, p_len, d]
    TensorPtrT<T> head;    // [d, K]

    static BaselinePrefixAdapterT init(const AdapterConfig& cfg) {
        AdapterConfig c = cfg;
        c.method = Method::baseline_prefix;
        c.p_len = c.resolved_p_len();
        c.validate();
        SplitMix64 rng(c.seed);
        BaselinePrefixAdapterT a;
        a.cfg = c;
        a.prefix = detail::normal_param<T>({c.layers, 2, c.p_len, c.d}, rng, 0.02);
        a.head = make_tensor<T>({c.d, c.num_labels}, true);
        return a;
    }

    std::vector<NamedParam<T>> named_params() const {
        return {{"prefix", prefix}, {"head", head}};
    }
};

template <class T>
using AnyAdapterT = std::variant<PrefixAdapterT<T>, PromptAdapterT<T>, BaselinePrefixAdapterT<T>,
                                 BaselinePromptAdapterT<T>>;

using AnyAdapter = AnyAdapterT<float>;

template <class T>
std::vector<NamedParam<T>> adapter_named_params(const AnyAdapterT<T>& adapter) {
    return std::visit([](const auto& a) { return a.named_params(); }, adapter);
}

template <class T>
const AdapterConfig& adapter_config(const AnyAdapterT<T>& adapter) {
    return std::visit([](const auto& a) -> const AdapterConfig& { return a.cfg; }, adapter);
}

template <class T>
AnyAdapterT<T> make_adapter(const AdapterConfig& cfg) {
    switch (cfg.method) {
        case Method::lt_prefix: return PrefixAdapterT<T>::init(cfg);
        case Method::lt_prompt: return PromptAdapterT<T>::init(cfg);
        case Method::baseline_prefix: return BaselinePrefixAdapterT<T>::init(cfg);
        case Method::baseline_prompt: return BaselinePromptAdapterT<T>::init(cfg);
    }
    throw ConfigError("unknown method enum value");
}

// ---------------------------------------------------------------------------
// attention_pool: score each of the l label-token states with a learned
// d-vector, softmax the scores into weights alpha (padded positions forced to
// zero weight), and reduce to the alpha-weighted row sum.
// ---------------------------------------------------------------------------
template <class T>
struct PoolResult {
    TensorPtrT<T> alpha;   // [1, l]
    TensorPtrT<T> pooled;  // [1, d]
};

template <class T>
PoolResult<T> attention_pool(TapeT<T>& tape, const TensorPtrT<T>& h, const TensorPtrT<T>& w,
                             std::span<const char> valid_mask) {
    if (h->ndim() != 2) {
        throw ShapeError("attention_pool: h must be [l,d], got " + shape_str(h->shape));
    }
    const std::int64_t l = h->shape[0];
    const std::int64_t d = h->shape[1];
    if (w->numel() != d) {
        throw ShapeError("attention_pool: score vector has " + std::to_string(w->numel()) +
                         " entries, want " + std::to_string(d));
    }
    if (static_cast<std::int64_t>(valid_mask.size()) != l) {
        throw ShapeError("attention_pool: mask length " + std::to_string(valid_mask.size()) +
                         " vs l=" + std::to_string(l));
    }
    bool any_valid = false;
    for (char c : valid_mask) any_valid = any_valid || (c != 0);
    if (!any_valid) {
        throw DataError("attention_pool: all positions padded");
    }

    auto scores = reshape(tape, matmul(tape, h, reshape(tape, w, {d, 1})), {1, l});
    auto mask = make_tensor<T>({1, l}, false);
    for (std::int64_t i = 0; i < l; ++i) {
        mask->data[i] = valid_mask[static_cast<std::size_t>(i)] ? T(0) : static_cast<T>(kMaskedScore);
    }
    PoolResult<T> out;
    out.alpha = softmax_lastdim(tape, add(tape, scores, mask));
    out.pooled = matmul(tape, out.alpha, h);
    return out;
}

// ---------------------------------------------------------------------------
// build_prefix: label hidden states -> per-layer past key/values through the
// pooling and the bias-free transform. Gradients reach w_phi and w_psi only.
// ---------------------------------------------------------------------------
template <class T>
PastKeyValuesT<T> build_prefix(TapeT<T>& tape, const PrefixAdapterT<T>& a,
                               const TensorPtrT<T>& h_label, std::span<const char> valid_mask) {
    const auto& c = a.cfg;
    if (h_label->ndim() != 2 || h_label->shape[0] != c.l || h_label->shape[1] != c.d) {
        throw ShapeError("build_prefix: label states " + shape_str(h_label->shape) + ", want [" +
                         std::to_string(c.l) + "," + std::to_string(c.d) + "]");
    }
    auto pool = attention_pool(tape, h_label, a.w_phi, valid_mask);
    const auto& fed = (c.pooling == PoolingMode::weights) ? pool.alpha : pool.pooled;
    auto flat = matmul(tape, fed, a.w_psi);  // [1, 2*layers*p_len*d]
    auto rows = reshape(tape, flat, {2 * c.layers * c.p_len, c.d});

    const std::int64_t hd = c.d / c.heads;
    PastKeyValuesT<T> pkv;
    pkv.p_len = c.p_len;
    for (std::int64_t li = 0; li < c.layers; ++li) {
        auto key_rows = slice_rows(tape, rows, li * 2 * c.p_len, li * 2 * c.p_len + c.p_len);
        auto value_rows = slice_rows(tape, rows, li * 2 * c.p_len + c.p_len, (li + 1) * 2 * c.p_len);
        auto to_heads = [&](const TensorPtrT<T>& block) {
            return permute102(tape, reshape(tape, block, {c.p_len, c.heads, hd}));
        };
        pkv.layers.push_back({to_heads(key_rows), to_heads(value_rows)});
    }
    return pkv;
}

namespace detail {

template <class T>
TensorPtrT<T> readout_logits(TapeT<T>& tape, const TensorPtrT<T>& hidden_states,
                             const TensorPtrT<T>& head) {
    const std::int64_t last = hidden_states->shape[0] - 1;
    auto pooled = take_row(tape, hidden_states, last);  // [1,d]
    auto logits = matmul(tape, pooled, head);
    return reshape(tape, logits, {logits->shape[1]});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Method forwards. Each returns the logit vector for one (label?, text)
// input; the *_cached variants take precomputed frozen label encodings so
// training loops do not re-encode the K labels every item.
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> prefix_forward_cached(TapeT<T>& tape, const BackboneT<T>& backbone,
                                    const PrefixAdapterT<T>& a, const TensorPtrT<T>& h_label,
                                    std::span<const char> label_mask,
                                    std::span<const int> text_ids) {
    a.cfg.check_backbone(backbone.config());
    auto pkv = build_prefix(tape, a, h_label, label_mask);
    auto hs = backbone.encode_with_prefix(tape, text_ids, pkv);
    return detail::readout_logits(tape, hs, a.w_zeta);
}

template <class T>
TensorPtrT<T> prefix_forward(TapeT<T>& tape, const BackboneT<T>& backbone,
                             const PrefixAdapterT<T>& a, std::span<const int> label_ids,
                             std::span<const char> label_mask, std::span<const int> text_ids) {
    auto h_label = backbone.encode(tape, label_ids);
    return prefix_forward_cached(tape, backbone, a, h_label, label_mask, text_ids);
}

// Text forward with a prebuilt prefix; used at evaluation time where the
// per-label PastKeyValues are computed once and reused across texts.
template <class T>
TensorPtrT<T> prefix_forward_with_pkv(TapeT<T>& tape, const BackboneT<T>& backbone,
                                      const PrefixAdapterT<T>& a, const PastKeyValuesT<T>& pkv,
                                      std::span<const int> text_ids) {
    auto hs = backbone.encode_with_prefix(tape, text_ids, pkv);
    return detail::readout_logits(tape, hs, a.w_zeta);
}

template <class T>
TensorPtrT<T> prompt_forward_cached(TapeT<T>& tape, const BackboneT<T>& backbone,
                                    const PromptAdapterT<T>& a, const TensorPtrT<T>& h_label,
                                    std::span<const int> text_ids) {
    a.cfg.check_backbone(backbone.config());
    auto label_embed = matmul(tape, h_label, a.w_gamma);  // [l,d]
    auto text_embed = backbone.embed(tape, text_ids);     // [n,d]
    auto hs = backbone.forward_from_embeddings(tape, concat_rows(tape, label_embed, text_embed));
    return detail::readout_logits(tape, hs, a.w_zeta);
}

template <class T>
TensorPtrT<T> prompt_forward(TapeT<T>& tape, const BackboneT<T>& backbone,
                             const PromptAdapterT<T>& a, std::span<const int> label_ids,
                             std::span<const int> text_ids) {
    auto h_label = backbone.encode(tape, label_ids);
    return prompt_forward_cached(tape, backbone, a, h_label, text_ids);
}

template <class T>
TensorPtrT<T> baseline_prompt_forward(TapeT<T>& tape, const BackboneT<T>& backbone,
                                      const BaselinePromptAdapterT<T>& a,
                                      std::span<const int> text_ids) {
    a.cfg.check_backbone(backbone.config());
    auto text_embed = backbone.embed(tape, text_ids);
    auto hs = backbone.forward_from_embeddings(tape, concat_rows(tape, a.soft_prompt, text_embed));
    return detail::readout_logits(tape, hs, a.head);
}

// Expand the free prefix tensor [layers, 2, p_len, d] into per-layer
// key/value head blocks.
template <class T>
PastKeyValuesT<T> baseline_prefix_pkv(TapeT<T>& tape, const BaselinePrefixAdapterT<T>& a) {
    const auto& c = a.cfg;
    const std::int64_t hd = c.d / c.heads;
    auto rows = reshape(tape, a.prefix, {c.layers * 2 * c.p_len, c.d});
    PastKeyValuesT<T> pkv;
    pkv.p_len = c.p_len;
    for (std::int64_t li = 0; li < c.layers; ++li) {
        auto key_rows = slice_rows(tape, rows, li * 2 * c.p_len, li * 2 * c.p_len + c.p_len);
        auto value_rows = slice_rows(tape, rows, li * 2 * c.p_len + c.p_len, (li + 1) * 2 * c.p_len);
        auto to_heads = [&](const TensorPtrT<T>& block) {
            return permute102(tape, reshape(tape, block, {c.p_len, c.heads, hd}));
        };
        pkv.layers.push_back({to_heads(key_rows), to_heads(value_rows)});
    }
    return pkv;
}

template <class T>
TensorPtrT<T> baseline_prefix_forward(TapeT<T>& tape, const BackboneT<T>& backbone,
                                      const BaselinePrefixAdapterT<T>& a,
                                      std::span<const int> text_ids) {
    a.cfg.check_backbone(backbone.config());
    auto pkv = baseline_prefix_pkv(tape, a);
    auto hs = backbone.encode_with_prefix(tape, text_ids, pkv);
    return detail::readout_logits(tape, hs, a.head);
}

// ---------------------------------------------------------------------------
// Parameter audit: closed-form expected count vs the sum of requires_grad
// tensor sizes. A mismatch is a reported result, not an error.
// ---------------------------------------------------------------------------
struct AuditReport {
    std::int64_t expected = 0;
    std::int64_t actual = 0;
    std::string formula;
    bool match = false;
};

inline std::int64_t expected_param_count(const AdapterConfig& cfg) {
    const auto d = cfg.d, l = cfg.l, m = cfg.layers, k = cfg.num_labels;
    const auto p = cfg.resolved_p_len();
    switch (cfg.method) {
        case Method::lt_prefix:
            if (cfg.pooling == PoolingMode::weights) return d + 2 * l * m * d + 2 * d;
            return d + 2 * p * m * d * d + 2 * d;
        case Method::lt_prompt: return d * (d + 2);
        case Method::baseline_prompt: return d * (l + k);
        case Method::baseline_prefix: return 2 * m * p * d + d * k;
    }
    throw ConfigError("unknown method enum value");
}

inline std::string audit_formula(const AdapterConfig& cfg) {
    switch (cfg.method) {
        case Method::lt_prefix:
            return cfg.pooling == PoolingMode::weights ? "d + 2*l*m*d + 2*d"
                                                       : "d + 2*p_len*m*d^2 + 2*d";
        case Method::lt_prompt: return "d*(d+2)";
        case Method::baseline_prompt: return "d*(l+K)";
        case Method::baseline_prefix: return "2*m*p_len*d + d*K";
    }
    throw ConfigError("unknown method enum value");
}

template <class T>
AuditReport audit_params(const AdapterConfig& cfg) {
    AuditReport report;
    report.expected = expected_param_count(cfg);
    report.formula = audit_formula(cfg);
    auto adapter = make_adapter<T>(cfg);
    for (const auto& p : adapter_named_params(adapter)) {
        if (p.tensor->requires_grad) report.actual += p.tensor->numel();
    }
    report.match = (report.expected == report.actual);
    return report;
}

// ---------------------------------------------------------------------------
// Persistence: the LTW1 container with method + dims in the header.
// ---------------------------------------------------------------------------

inline nlohmann::json adapter_config_json(const AdapterConfig& cfg) {
    return nlohmann::json{{"method", method_name(cfg.method)},
                          {"d", cfg.d},
                          {"l", cfg.l},
                          {"layers", cfg.layers},
                          {"heads", cfg.heads},
                          {"num_labels", cfg.num_labels},
                          {"p_len", cfg.p_len},
                          {"pooling", pooling_name(cfg.pooling)},
                          {"seed", cfg.seed}};
}

inline AdapterConfig adapter_config_from_json(const nlohmann::json& j) {
    AdapterConfig cfg;
    cfg.method = parse_method(j.at("method").get<std::string>());
    cfg.d = j.at("d").get<std::int64_t>();
    cfg.l = j.at("l").get<std::int64_t>();
    cfg.layers = j.at("layers").get<std::int64_t>();
    cfg.heads = j.at("heads").get<std::int64_t>();
    cfg.num_labels = j.at("num_labels").get<std::int64_t>();
    cfg.p_len = j.at("p_len").get<std::int64_t>();
    cfg.pooling = parse_pooling(j.at("pooling").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

template <class T>
void save_adapter(const std::string& path, const AnyAdapterT<T>& adapter) {
    LtwFile file;
    file.meta["kind"] = "adapter";
    file.meta["method"] = method_name(adapter_config(adapter).method);
    file.meta["config"] = adapter_config_json(adapter_config(adapter));
    for (const auto& p : adapter_named_params(adapter)) {
        LtwTensor t;
        t.name = p.name;
        t.shape = p.tensor->shape;
        t.data.resize(p.tensor->data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = static_cast<float>(p.tensor->data[i]);
        }
        file.tensors.push_back(std::move(t));
    }
    save_ltw(path, file);
}

template <class T>
AnyAdapterT<T> load_adapter_t(const std::string& path) {
    const LtwFile file = load_ltw(path);
    if (file.meta.value("kind", "") != "adapter") {
        throw WeightFormatError(path + ": not an adapter weight file");
    }
    const AdapterConfig cfg = adapter_config_from_json(file.meta.at("config"));
    AnyAdapterT<T> adapter = make_adapter<T>(cfg);
    for (const auto& p : adapter_named_params(adapter)) {
        const LtwTensor& t = file.find(p.name);
        if (t.shape != p.tensor->shape) {
            throw WeightFormatError(path + ": tensor '" + p.name + "' has shape " +
                                    shape_str(t.shape) + ", want " + shape_str(p.tensor->shape));
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            p.tensor->data[i] = static_cast<T>(t.data[i]);
        }
    }
    return adapter;
}

inline AnyAdapter load_adapter(const std::string& path) { return load_adapter_t<float>(path); }

}  // namespace ltuning
