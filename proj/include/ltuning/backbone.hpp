#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ltuning/errors.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tensor.hpp"
#include "ltuning/weights_io.hpp"

namespace ltuning {

struct BackboneConfig {
    std::int64_t d = 64;        // model dimension
    std::int64_t layers = 4;    // transformer layer count
    std::int64_t heads = 4;     // attention heads
    std::int64_t vocab = 512;   // vocabulary size
    std::int64_t max_seq = 128; // maximum total sequence length (prefix + text)
    std::uint64_t seed = 1;     // weight init seed

    void validate() const {
        if (d <= 0 || layers <= 0 || heads <= 0 || vocab <= 0 || max_seq <= 0) {
            throw ConfigError("backbone config: all extents must be positive");
        }
        if (d % heads != 0) {
            throw ConfigError("backbone config: d=" + std::to_string(d) +
                              " not divisible by heads=" + std::to_string(heads));
        }
    }

    std::int64_t head_dim() const { return d / heads; }
};

// Per-layer prefix key/value blocks: exactly one (key, value) pair per
// transformer layer, each shaped [heads, p_len, head_dim].
template <class T>
struct PastKeyValuesT {
    struct LayerKv {
        TensorPtrT<T> key;
        TensorPtrT<T> value;
    };
    std::vector<LayerKv> layers;
    std::int64_t p_len = 0;
};

using PastKeyValues = PastKeyValuesT<float>;

// Frozen decoder-only transformer standing in for the pre-trained model:
// pre-norm blocks, causal self-attention, GELU MLP with a 4d hidden layer,
// bias-free projections, fixed sinusoidal positional encodings. All
// parameters are created with requires_grad == false; gradients flow through
// activations to differentiable inputs (prefix key/values, injected
// embeddings) but never into the backbone weights.
template <class T>
class BackboneT {
public:
    struct Layer {
        TensorPtrT<T> ln1_gain, ln1_bias;
        TensorPtrT<T> wq, wk, wv, wo;
        TensorPtrT<T> ln2_gain, ln2_bias;
        TensorPtrT<T> w1, w2;
    };

    static BackboneT init(const BackboneConfig& cfg) {
        cfg.validate();
        BackboneT b;
        b.cfg_ = cfg;
        SplitMix64 rng(cfg.seed);
        // Projections use fan-in scaling so a *random frozen* network has
        // O(1) attention scores and GELU pre-activations, i.e. genuinely
        // nonlinear mixing. A 0.02-style init leaves the whole stack almost
        // linear, and a linear frozen encoder cannot express the label/text
        // interaction the NLI objective needs.
        auto normal_tensor = [&](shape_t shape, double scale) {
            auto t = make_tensor<T>(std::move(shape), false);
            for (auto& v : t->data) v = static_cast<T>(scale * rng.next_normal());
            return t;
        };
        auto const_tensor = [&](shape_t shape, T fill) {
            auto t = make_tensor<T>(std::move(shape), false);
            std::fill(t->data.begin(), t->data.end(), fill);
            return t;
        };

        const auto d = cfg.d;
        const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d));
        const double mlp_out_scale = 1.0 / std::sqrt(static_cast<double>(4 * d));
        b.tok_embed_ = normal_tensor({cfg.vocab, d}, 0.02);
        b.layers_.resize(static_cast<std::size_t>(cfg.layers));
        for (auto& layer : b.layers_) {
            layer.ln1_gain = const_tensor({d}, T(1));
            layer.ln1_bias = const_tensor({d}, T(0));
            layer.wq = normal_tensor({d, d}, proj_scale);
            layer.wk = normal_tensor({d, d}, proj_scale);
            layer.wv = normal_tensor({d, d}, proj_scale);
            layer.wo = normal_tensor({d, d}, proj_scale);
            layer.ln2_gain = const_tensor({d}, T(1));
            layer.ln2_bias = const_tensor({d}, T(0));
            layer.w1 = normal_tensor({d, 4 * d}, proj_scale);
            layer.w2 = normal_tensor({4 * d, d}, mlp_out_scale);
        }
        b.lnf_gain_ = const_tensor({d}, T(1));
        b.lnf_bias_ = const_tensor({d}, T(0));
        b.build_pos_encoding();
        return b;
    }

    const BackboneConfig& config() const { return cfg_; }

    // Fixed serialization order; also the checksum order.
    std::vector<NamedParam<T>> named_params() const {
        std::vector<NamedParam<T>> out;
        out.push_back({"tok_embed", tok_embed_});
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            const std::string pre = "layers." + std::to_string(i) + ".";
            out.push_back({pre + "ln1.gain", l.ln1_gain});
            out.push_back({pre + "ln1.bias", l.ln1_bias});
            out.push_back({pre + "attn.wq", l.wq});
            out.push_back({pre + "attn.wk", l.wk});
            out.push_back({pre + "attn.wv", l.wv});
            out.push_back({pre + "attn.wo", l.wo});
            out.push_back({pre + "ln2.gain", l.ln2_gain});
            out.push_back({pre + "ln2.bias", l.ln2_bias});
            out.push_back({pre + "mlp.w1", l.w1});
            out.push_back({pre + "mlp.w2", l.w2});
        }
        out.push_back({"lnf.gain", lnf_gain_});
        out.push_back({"lnf.bias", lnf_bias_});
        return out;
    }

    std::uint32_t checksum() const { return params_checksum(named_params()); }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& p : named_params()) n += p.tensor->numel();
        return n;
    }

    // Closed form of the declared shapes: V*d for the embedding, per layer
    // 12*d^2 projections plus 4*d layer-norm terms, final layer-norm 2*d.
    static std::int64_t expected_param_count(const BackboneConfig& cfg) {
        return cfg.vocab * cfg.d + cfg.layers * (12 * cfg.d * cfg.d + 4 * cfg.d) + 2 * cfg.d;
    }

    // Raw embedding rows; positional encodings are added inside
    // forward_from_embeddings, not here.
    TensorPtrT<T> embed(TapeT<T>& tape, std::span<const int> ids) const {
        return embedding_gather(tape, tok_embed_, std::vector<int>(ids.begin(), ids.end()));
    }

    TensorPtrT<T> encode(TapeT<T>& tape, std::span<const int> ids) const {
        check_text_len(static_cast<std::int64_t>(ids.size()), 0);
        return forward_impl(tape, embed(tape, ids), nullptr);
    }

    TensorPtrT<T> encode_with_prefix(TapeT<T>& tape, std::span<const int> ids,
                                     const PastKeyValuesT<T>& pkv) const {
        validate_pkv(pkv);
        check_text_len(static_cast<std::int64_t>(ids.size()), pkv.p_len);
        return forward_impl(tape, embed(tape, ids), &pkv);
    }

    TensorPtrT<T> forward_from_embeddings(TapeT<T>& tape, const TensorPtrT<T>& e) const {
        if (e->ndim() != 2 || e->shape[1] != cfg_.d) {
            throw ShapeError("forward_from_embeddings: want [n," + std::to_string(cfg_.d) +
                             "], got " + shape_str(e->shape));
        }
        check_text_len(e->shape[0], 0);
        return forward_impl(tape, e, nullptr);
    }

    TensorPtrT<T> forward_from_embeddings_with_prefix(TapeT<T>& tape, const TensorPtrT<T>& e,
                                                      const PastKeyValuesT<T>& pkv) const {
        if (e->ndim() != 2 || e->shape[1] != cfg_.d) {
            throw ShapeError("forward_from_embeddings: want [n," + std::to_string(cfg_.d) +
                             "], got " + shape_str(e->shape));
        }
        validate_pkv(pkv);
        check_text_len(e->shape[0], pkv.p_len);
        return forward_impl(tape, e, &pkv);
    }

    // Direct access for tests that perturb weights; the tuning paths never
    // touch these.
    const TensorPtrT<T>& token_embedding_table() const { return tok_embed_; }

private:
    void check_text_len(std::int64_t n, std::int64_t p_len) const {
        if (n < 1) throw ShapeError("backbone forward: empty input sequence");
        if (n + p_len > cfg_.max_seq) {
            throw ShapeError("backbone forward: sequence length " + std::to_string(n) +
                             " + prefix " + std::to_string(p_len) + " exceeds max_seq " +
                             std::to_string(cfg_.max_seq));
        }
    }

    void validate_pkv(const PastKeyValuesT<T>& pkv) const {
        if (static_cast<std::int64_t>(pkv.layers.size()) != cfg_.layers) {
            throw ShapeError("encode_with_prefix: prefix has " + std::to_string(pkv.layers.size()) +
                             " layers, backbone has " + std::to_string(cfg_.layers));
        }
        const shape_t want{cfg_.heads, pkv.p_len, cfg_.head_dim()};
        for (const auto& kv : pkv.layers) {
            if (kv.key->shape != want || kv.value->shape != want) {
                throw ShapeError("encode_with_prefix: prefix block shape " + shape_str(kv.key->shape) +
                                 ", want " + shape_str(want));
            }
        }
    }

    // Fixed sinusoidal positional encodings, scaled to the embedding
    // magnitude so position does not drown out token identity in the
    // residual stream.
    void build_pos_encoding() {
        pos_enc_.assign(static_cast<std::size_t>(cfg_.max_seq * cfg_.d), T(0));
        const double dd = static_cast<double>(cfg_.d);
        constexpr double pos_scale = 0.02;
        for (std::int64_t pos = 0; pos < cfg_.max_seq; ++pos) {
            for (std::int64_t i = 0; i < cfg_.d; i += 2) {
                const double angle = static_cast<double>(pos) /
                                     std::pow(10000.0, static_cast<double>(i) / dd);
                pos_enc_[static_cast<std::size_t>(pos * cfg_.d + i)] =
                    static_cast<T>(pos_scale * std::sin(angle));
                if (i + 1 < cfg_.d) {
                    pos_enc_[static_cast<std::size_t>(pos * cfg_.d + i + 1)] =
                        static_cast<T>(pos_scale * std::cos(angle));
                }
            }
        }
    }

    // Additive attention mask for text queries over [prefix ∥ text] keys:
    // every prefix position is visible, text keys are causal. One tensor per
    // forward, shared by all layers.
    TensorPtrT<T> build_mask(std::int64_t n, std::int64_t p_len) const {
        const std::int64_t total = p_len + n;
        auto mask = make_tensor<T>({cfg_.heads, n, total}, false);
        for (std::int64_t i = 0; i < n; ++i) {
            T* row = mask->data.data() + i * total;
            for (std::int64_t j = p_len + i + 1; j < total; ++j) {
                row[j] = static_cast<T>(kMaskedScore);
            }
        }
        // Replicate the first head's block for the rest.
        const std::int64_t block = n * total;
        for (std::int64_t h = 1; h < cfg_.heads; ++h) {
            std::copy(mask->data.begin(), mask->data.begin() + block,
                      mask->data.begin() + h * block);
        }
        return mask;
    }

    TensorPtrT<T> forward_impl(TapeT<T>& tape, const TensorPtrT<T>& e,
                               const PastKeyValuesT<T>* pkv) const {
        const std::int64_t n = e->shape[0];
        const std::int64_t d = cfg_.d;
        const std::int64_t H = cfg_.heads;
        const std::int64_t hd = cfg_.head_dim();
        const std::int64_t p_len = pkv ? pkv->p_len : 0;

        // Token positions are numbered after the prefix positions.
        auto pos = make_tensor<T>({n, d}, false);
        std::copy(pos_enc_.begin() + p_len * d, pos_enc_.begin() + (p_len + n) * d,
                  pos->data.begin());
        auto x = add(tape, e, pos);

        auto mask = build_mask(n, p_len);
        const T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(hd));

        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const auto& layer = layers_[li];
            auto a = layer_norm(tape, x, layer.ln1_gain, layer.ln1_bias);
            auto split = [&](const TensorPtrT<T>& proj) {
                return permute102(tape, reshape(tape, proj, {n, H, hd}));
            };
            auto q = split(matmul(tape, a, layer.wq));  // [H,n,hd]
            auto k = split(matmul(tape, a, layer.wk));
            auto v = split(matmul(tape, a, layer.wv));
            if (pkv) {
                k = concat_dim1(tape, pkv->layers[li].key, k);    // [H,p+n,hd]
                v = concat_dim1(tape, pkv->layers[li].value, v);
            }
            auto scores = scale(tape, matmul(tape, q, permute021(tape, k)), inv_sqrt_hd);
            auto probs = softmax_lastdim(tape, add(tape, scores, mask));
            auto att = matmul(tape, probs, v);                          // [H,n,hd]
            auto merged = reshape(tape, permute102(tape, att), {n, d}); // [n,d]
            x = add(tape, x, matmul(tape, merged, layer.wo));

            auto b = layer_norm(tape, x, layer.ln2_gain, layer.ln2_bias);
            auto hidden = gelu(tape, matmul(tape, b, layer.w1));
            x = add(tape, x, matmul(tape, hidden, layer.w2));
        }
        return layer_norm(tape, x, lnf_gain_, lnf_bias_);
    }

    BackboneConfig cfg_;
    TensorPtrT<T> tok_embed_;
    std::vector<Layer> layers_;
    TensorPtrT<T> lnf_gain_, lnf_bias_;
    std::vector<T> pos_enc_;
};

using Backbone = BackboneT<float>;

// ---------------------------------------------------------------------------
// Persistence (LTW1 container)
// ---------------------------------------------------------------------------

inline nlohmann::json backbone_config_json(const BackboneConfig& cfg) {
    return nlohmann::json{{"d", cfg.d},         {"layers", cfg.layers},   {"heads", cfg.heads},
                          {"vocab", cfg.vocab}, {"max_seq", cfg.max_seq}, {"seed", cfg.seed}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    BackboneConfig cfg;
    cfg.d = j.at("d").get<std::int64_t>();
    cfg.layers = j.at("layers").get<std::int64_t>();
    cfg.heads = j.at("heads").get<std::int64_t>();
    cfg.vocab = j.at("vocab").get<std::int64_t>();
    cfg.max_seq = j.at("max_seq").get<std::int64_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

template <class T>
void save_backbone(const std::string& path, const BackboneT<T>& backbone) {
    LtwFile file;
    file.meta["kind"] = "backbone";
    file.meta["config"] = backbone_config_json(backbone.config());
    file.meta["param_count_formula"] = "vocab*d + layers*(12*d^2 + 4*d) + 2*d";
    for (const auto& p : backbone.named_params()) {
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
BackboneT<T> load_backbone_t(const std::string& path) {
    const LtwFile file = load_ltw(path);
    if (file.meta.value("kind", "") != "backbone") {
        throw WeightFormatError(path + ": not a backbone weight file");
    }
    const BackboneConfig cfg = backbone_config_from_json(file.meta.at("config"));
    auto backbone = BackboneT<T>::init(cfg);  // same seed, overwritten below
    for (const auto& p : backbone.named_params()) {
        const LtwTensor& t = file.find(p.name);
        if (t.shape != p.tensor->shape) {
            throw WeightFormatError(path + ": tensor '" + p.name + "' has shape " +
                                    shape_str(t.shape) + ", want " + shape_str(p.tensor->shape));
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            p.tensor->data[i] = static_cast<T>(t.data[i]);
        }
    }
    return backbone;
}

inline Backbone load_backbone(const std::string& path) { return load_backbone_t<float>(path); }

}  // namespace ltuning
