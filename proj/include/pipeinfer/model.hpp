#pragma once

// Seeded toy decoder-only transformer.
//
// Weights come from std::mt19937_64 seeded with ModelConfig::seed, drawn in a
// fixed order (embedding, then per layer wq wk wv wo w1 w2, then the output
// projection) and mapped to uniform [-1, 1) via the top 53 bits. All math is
// double precision with fixed loop order, so splitting the layer range or
// changing batch composition never changes a single bit of the result.

#include "pipeinfer/batch.hpp"
#include "pipeinfer/kv_cache.hpp"
#include "pipeinfer/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pipeinfer {

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t embed_dim = 64;
    std::size_t n_layers = 12;
    std::size_t n_heads = 1;
    Pos max_context = 1024;
    std::uint64_t seed = 0;
    double logit_scale = 4.0;

    void validate() const {
        if (vocab_size < 2) {
            throw ConfigError("vocab_size must be >= 2");
        }
        if (n_layers < 1) {
            throw ConfigError("n_layers must be >= 1");
        }
        if (embed_dim < 1 || n_heads < 1 || embed_dim % n_heads != 0) {
            throw ConfigError("embed_dim must be a positive multiple of n_heads");
        }
        if (max_context < 1) {
            throw ConfigError("max_context must be >= 1");
        }
        if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
            throw ConfigError("logit_scale must be positive");
        }
    }
};

// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;
    Matrix w1, w2;
};

class LayeredModel {
public:
    explicit LayeredModel(const ModelConfig& config) : config_(config) {
        config_.validate();
        std::mt19937_64 rng(config_.seed);
        const std::size_t d = config_.embed_dim;
        const std::size_t hidden = 2 * d;
        const double s_d = 1.0 / std::sqrt(static_cast<double>(d));
        const double s_h = 1.0 / std::sqrt(static_cast<double>(hidden));

        embedding_ = random_matrix(rng, config_.vocab_size, d, 1.0);
        layers_.reserve(config_.n_layers);
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            LayerWeights w;
            w.wq = random_matrix(rng, d, d, s_d);
            w.wk = random_matrix(rng, d, d, s_d);
            w.wv = random_matrix(rng, d, d, s_d);
            w.wo = random_matrix(rng, d, d, s_d);
            w.w1 = random_matrix(rng, hidden, d, s_d);
            w.w2 = random_matrix(rng, d, hidden, s_h);
            layers_.push_back(std::move(w));
        }
        output_ = random_matrix(rng, config_.vocab_size, d, config_.logit_scale * s_d);
    }

    const ModelConfig& config() const { return config_; }
    std::size_t n_layers() const { return layers_.size(); }
    std::size_t dim() const { return config_.embed_dim; }
    std::size_t vocab_size() const { return config_.vocab_size; }
    const LayerWeights& layer(std::size_t i) const { return layers_.at(i); }
    const Matrix& embedding() const { return embedding_; }
    const Matrix& output() const { return output_; }

    // FNV-1a over the raw bytes of every weight.
    std::uint64_t weights_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const Matrix& m) {
            for (double v : m.data) {
                std::uint64_t bits = 0;
                std::memcpy(&bits, &v, sizeof bits);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xffU;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        feed(embedding_);
        for (const auto& w : layers_) {
            for (const Matrix* m : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w1, &w.w2}) {
                feed(*m);
            }
        }
        feed(output_);
        return h;
    }

private:
    static Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale) {
        Matrix m{rows, cols, std::vector<double>(rows * cols)};
        for (double& v : m.data) {
            v = (2.0 * unit_double(rng()) - 1.0) * scale;
        }
        return m;
    }

    ModelConfig config_;
    Matrix embedding_;
    std::vector<LayerWeights> layers_;
    Matrix output_;
};

// Hidden states of one batch, one row per batch token.
struct Activations {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    RunId run_id = 0;

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::size_t bytes() const { return data.size() * sizeof(double); }
};

struct LogitsSet {
    std::vector<std::size_t> token_index; // batch index each row belongs to
    std::vector<std::vector<double>> rows;

    std::size_t size() const { return rows.size(); }
    std::size_t bytes() const {
        std::size_t n = 0;
        for (const auto& r : rows) {
            n += r.size() * sizeof(double);
        }
        return n;
    }
};

// Visibility between batch queries and keys. Key columns are the supplied
// cache cells followed by the batch tokens.
struct CellView {
    Pos pos = 0;
    SeqSet seqs;
};

class TreeAttentionMask {
public:
    TreeAttentionMask(std::size_t n_queries, std::size_t n_keys)
        : n_queries_(n_queries), n_keys_(n_keys), bits_(n_queries * n_keys, 0) {}

    std::size_t n_queries() const { return n_queries_; }
    std::size_t n_keys() const { return n_keys_; }
    bool visible(std::size_t q, std::size_t k) const { return bits_[q * n_keys_ + k] != 0; }
    void set(std::size_t q, std::size_t k, bool v) { bits_[q * n_keys_ + k] = v ? 1 : 0; }

private:
    std::size_t n_queries_;
    std::size_t n_keys_;
    std::vector<std::uint8_t> bits_;
};

inline TreeAttentionMask build_tree_mask(const Batch& batch, std::span<const CellView> cache_view) {
    const std::size_t nq = batch.size();
    const std::size_t nc = cache_view.size();
    TreeAttentionMask mask(nq, nc + nq);
    for (std::size_t q = 0; q < nq; ++q) {
        const auto& tq = batch.tokens[q];
        for (std::size_t k = 0; k < nc; ++k) {
            const auto& c = cache_view[k];
            mask.set(q, k, c.pos < tq.pos && c.seqs.intersects(tq.seqs));
        }
        for (std::size_t t = 0; t < nq; ++t) {
            const auto& tk = batch.tokens[t];
            mask.set(q, nc + t, t == q || (tk.pos < tq.pos && tk.seqs.intersects(tq.seqs)));
        }
    }
    return mask;
}

namespace detail {

inline void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* w = m.data.data() + r * m.cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) {
            acc += w[c] * x[c];
        }
        out[r] = acc;
    }
}

inline std::vector<double> rms_norm(std::span<const double> x) {
    double ss = 0.0;
    for (double v : x) {
        ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv;
    }
    return out;
}

inline double position_encoding(Pos pos, std::size_t i, std::size_t dim) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    const double a = static_cast<double>(pos) * freq;
    return (i % 2 == 0) ? std::sin(a) : std::cos(a);
}

} // namespace detail

inline Activations embed(const LayeredModel& model, const Batch& batch) {
    const std::size_t d = model.dim();
    Activations act{batch.size(), d, std::vector<double>(batch.size() * d), batch.run_id};
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto& t = batch.tokens[r];
        if (t.id < 0 || static_cast<std::size_t>(t.id) >= model.vocab_size()) {
            throw ConfigError("token id out of vocabulary: " + std::to_string(t.id));
        }
        auto e = model.embedding().row(static_cast<std::size_t>(t.id));
        auto out = act.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            out[i] = e[i] + detail::position_encoding(t.pos, i, d);
        }
    }
    return act;
}

// Evaluates layers [layer_begin, layer_end). When layer_begin is 0 the input is
// ignored and the batch is embedded; otherwise `input` must hold the previous
// range's output. One K/V cell per token per layer is added to `cache`.
inline Activations eval_layers(const LayeredModel& model, std::size_t layer_begin, std::size_t layer_end,
                               const Activations* input, const Batch& batch, KVCache& cache) {
    if (layer_begin >= layer_end || layer_end > model.n_layers()) {
        throw ConfigError("invalid layer range");
    }
    validate_batch(batch);
    const std::size_t d = model.dim();
    const std::size_t n = batch.size();
    Activations x;
    if (layer_begin == 0) {
        x = embed(model, batch);
    } else {
        if (input == nullptr || input->rows != n || input->cols != d) {
            throw ConfigError("activation dimension mismatch");
        }
        x = *input;
    }
    x.run_id = batch.run_id;

    const std::size_t n_heads = model.config().n_heads;
    const std::size_t hd = d / n_heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<double> q(n * d), k(n * d), v(n * d);
    std::vector<double> attn(d), proj(d), hidden(2 * d), mlp(d);
    struct Key {
        Pos pos;
        const double* k;
        const double* v;
    };
    std::vector<Key> keys;
    std::vector<double> scores;

    for (std::size_t l = layer_begin; l < layer_end; ++l) {
        const LayerWeights& w = model.layer(l);
        for (std::size_t r = 0; r < n; ++r) {
            auto xn = detail::rms_norm(x.row(r));
            detail::matvec(w.wq, xn, {q.data() + r * d, d});
            detail::matvec(w.wk, xn, {k.data() + r * d, d});
            detail::matvec(w.wv, xn, {v.data() + r * d, d});
        }

        const auto& cells = cache.cells(l);
        for (std::size_t r = 0; r < n; ++r) {
            const BatchToken& tq = batch.tokens[r];
            const auto qpos = static_cast<std::size_t>(tq.pos);
            // One slot per position; every position before the query and the
            // query itself must be visible exactly once.
            keys.assign(qpos + 1, Key{-1, nullptr, nullptr});
            auto place = [&](Pos pos, const double* kp, const double* vp) {
                Key& slot = keys[static_cast<std::size_t>(pos)];
                if (slot.pos >= 0) {
                    throw CacheError("duplicate visible cache cells for position " + std::to_string(pos));
                }
                slot = Key{pos, kp, vp};
            };
            for (const auto& c : cells) {
                if (c.pos >= tq.pos) {
                    break;
                }
                if (c.seqs.intersects(tq.seqs)) {
                    place(c.pos, c.key.data(), c.value.data());
                }
            }
            for (std::size_t t = 0; t < n; ++t) {
                const BatchToken& tk = batch.tokens[t];
                if (t == r || (tk.pos < tq.pos && tk.seqs.intersects(tq.seqs))) {
                    place(tk.pos, k.data() + t * d, v.data() + t * d);
                }
            }
            for (const Key& key : keys) {
                if (key.pos < 0) {
                    throw CacheError("missing visible cache cells for position " + std::to_string(qpos));
                }
            }

            const double* qr = q.data() + r * d;
            scores.resize(keys.size());
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * hd;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < hd; ++j) {
                        s += qr[off + j] * keys[i].k[off + j];
                    }
                    scores[i] = s * inv_sqrt_hd;
                    mx = std::max(mx, scores[i]);
                }
                double denom = 0.0;
                for (std::size_t i = 0; i < keys.size(); ++i) {
                    scores[i] = std::exp(scores[i] - mx);
                    denom += scores[i];
                }
                for (std::size_t j = 0; j < hd; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < keys.size(); ++i) {
                        acc += scores[i] * keys[i].v[off + j];
                    }
                    attn[off + j] = acc / denom;
                }
            }
            detail::matvec(w.wo, attn, proj);
            auto xr = x.row(r);
            for (std::size_t i = 0; i < d; ++i) {
                xr[i] += proj[i];
            }
            auto hn = detail::rms_norm(xr);
            detail::matvec(w.w1, hn, hidden);
            for (double& h : hidden) {
                h = h > 0.0 ? h : 0.0;
            }
            detail::matvec(w.w2, hidden, mlp);
            for (std::size_t i = 0; i < d; ++i) {
                xr[i] += mlp[i];
            }
        }

        for (std::size_t r = 0; r < n; ++r) {
            const auto& t = batch.tokens[r];
            cache.insert(l, t.pos, t.seqs, std::vector<double>(k.begin() + r * d, k.begin() + (r + 1) * d),
                         std::vector<double>(v.begin() + r * d, v.begin() + (r + 1) * d));
        }
    }
    return x;
}

inline LogitsSet logits(const LayeredModel& model, const Activations& final_acts, const Batch& batch) {
    if (final_acts.rows != batch.size() || final_acts.cols != model.dim()) {
        throw ConfigError("activation dimension mismatch");
    }
    LogitsSet out;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (!batch.tokens[r].logits) {
            continue;
        }
        auto xn = detail::rms_norm(final_acts.row(r));
        std::vector<double> row(model.vocab_size());
        detail::matvec(model.output(), xn, row);
        out.token_index.push_back(r);
        out.rows.push_back(std::move(row));
    }
    if (out.rows.empty()) {
        throw ConfigError("no batch token requested logits");
    }
    return out;
}

// Argmax; ties go to the lowest token id.
inline Token greedy_sample(std::span<const double> v) {
    if (v.empty()) {
        throw ConfigError("empty logits vector");
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::isnan(v[i])) {
            throw ConfigError("NaN in logits");
        }
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return static_cast<Token>(best);
}

// Best token other than greedy_sample(v), same tie rule.
inline Token second_best(std::span<const double> v) {
    const Token first = greedy_sample(v);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (static_cast<Token>(i) == first) {
            continue;
        }
        if (!best || v[i] > v[*best]) {
            best = i;
        }
    }
    return static_cast<Token>(*best);
}

// Largest softmax probability.
inline double max_probability(std::span<const double> v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        mx = std::max(mx, x);
    }
    double denom = 0.0;
    for (double x : v) {
        denom += std::exp(x - mx);
    }
    return 1.0 / denom;
}

} // namespace pipeinfer
