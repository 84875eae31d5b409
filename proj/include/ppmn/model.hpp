#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ppmn/ops.hpp"
#include "ppmn/tensor.hpp"

namespace ppmn {

// How the S compatible pixels of a phrase are chosen from its matching map.
enum class PoolMode {
    bins,  // argmax of each of S contiguous bins (adaptive max pooling)
    topk,  // global top-S scores
};

// Feature source the compatible pixels are gathered from.
enum class GatherSource {
    projected,  // the round's 1x1 projection + GroupNorm + ReLU output
    raw,        // the (position-encoded) input map; needs visual_dim == joint_dim
};

enum class AttentionScale {
    joint,     // 1/sqrt(C)
    per_head,  // 1/sqrt(C/D)
};

struct ModelConfig {
    std::size_t visual_dim = 32;   // C_v
    std::size_t phrase_dim = 32;   // C_r
    std::size_t joint_dim = 64;    // C
    std::size_t heads = 4;         // D
    std::size_t compatible_pixels = 200;  // S
    std::size_t rounds = 3;        // L
    std::size_t ffn_hidden = 0;    // 0 selects 4 * C
    std::size_t norm_groups = 8;   // reduced to the largest divisor of C not above it
    bool positional_encoding = true;
    PoolMode pool = PoolMode::bins;
    GatherSource gather = GatherSource::projected;
    AttentionScale attention_scale = AttentionScale::joint;

    std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 4 * joint_dim; }
    std::size_t head_dim() const { return joint_dim / heads; }
    std::size_t effective_groups() const;

    // Throws ConfigError on inconsistent dimensions.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct HeadParams {
    Tensor<T> query;  // W5, head_dim x head_dim
    Tensor<T> key;    // W6
    Tensor<T> value;  // W7
};

template <typename T>
struct RoundParams {
    std::vector<HeadParams<T>> heads;
    Tensor<T> ln_in_gamma, ln_in_beta;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor<T> ln_out_gamma, ln_out_beta;
    Tensor<T> visual_w, visual_b;  // 1x1 projection C_v -> C
    Tensor<T> gn_gamma, gn_beta;
    std::array<Tensor<T>, 4> mlp_w;  // three hidden layers plus output
    std::array<Tensor<T>, 4> mlp_b;
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Tensor<T> visual_proj;  // W1, C_v x C
    Tensor<T> phrase_proj;  // W2, C_r x C
    std::vector<RoundParams<T>> rounds;

    // Calls f(name, tensor) for every parameter in a fixed order.
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
        return n;
    }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("proj.visual"), self.visual_proj);
        f(std::string("proj.phrase"), self.phrase_proj);
        for (std::size_t l = 0; l < self.rounds.size(); ++l) {
            auto& r = self.rounds[l];
            const std::string p = "round" + std::to_string(l) + ".";
            for (std::size_t d = 0; d < r.heads.size(); ++d) {
                const std::string h = p + "head" + std::to_string(d) + ".";
                f(h + "query", r.heads[d].query);
                f(h + "key", r.heads[d].key);
                f(h + "value", r.heads[d].value);
            }
            f(p + "ln_in.gamma", r.ln_in_gamma);
            f(p + "ln_in.beta", r.ln_in_beta);
            f(p + "ffn.w1", r.ffn_w1);
            f(p + "ffn.b1", r.ffn_b1);
            f(p + "ffn.w2", r.ffn_w2);
            f(p + "ffn.b2", r.ffn_b2);
            f(p + "ln_out.gamma", r.ln_out_gamma);
            f(p + "ln_out.beta", r.ln_out_beta);
            f(p + "visual.w", r.visual_w);
            f(p + "visual.b", r.visual_b);
            f(p + "gn.gamma", r.gn_gamma);
            f(p + "gn.beta", r.gn_beta);
            for (std::size_t k = 0; k < r.mlp_w.size(); ++k) {
                f(p + "mlp" + std::to_string(k) + ".w", r.mlp_w[k]);
                f(p + "mlp" + std::to_string(k) + ".b", r.mlp_b[k]);
            }
        }
    }
};

// Shape of every named parameter implied by a config, in visit order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

// Xavier-uniform weights from CounterRng(seed) drawn in visit order; norm
// scales 1, all shifts and biases 0.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

// Element-wise conversion into fresh leaves.
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p, bool requires_grad);

// 2-D sinusoidal code, H x W x C_v row-major. The first C_v/2 channels
// encode the row, the rest the column; within a half, channel j uses
// frequency 10000^(-2*floor(j/2)/half) with sin on even j and cos on odd j.
std::vector<double> positional_code(std::size_t height, std::size_t width, std::size_t channels);

template <typename T>
Tensor<T> add_positional_encoding(const Tensor<T>& visual);

template <typename T>
struct Projection {
    Tensor<T> pixels;   // (H*W) x C
    Tensor<T> phrases;  // N x C
};

template <typename T>
Projection<T> project_round0(const Tensor<T>& visual, const Tensor<T>& phrases, const ModelParams<T>& p);

// phrases: N x C, pixels: P x C  ->  raw matching maps N x P.
template <typename T>
Tensor<T> match(const Tensor<T>& pixels, const Tensor<T>& phrases);

// Sigmoid of the matching maps reshaped to N x H x W.
template <typename T>
Tensor<T> respond(const Tensor<T>& matching, std::size_t height, std::size_t width);

template <typename T>
struct RoundOutput {
    Tensor<T> phrases;     // refined phrase features, N x C
    Tensor<T> matching;    // next matching maps, N x P
    IndexTensor compatible;
};

// One refinement round. `visual` is the H x W x C_v map (positional code
// already applied), `phrases` the N x C features of this round and
// `matching` its N x P maps.
template <typename T>
RoundOutput<T> lcpa_round(const Tensor<T>& visual, const Tensor<T>& phrases, const Tensor<T>& matching,
                          const RoundParams<T>& p, const ModelConfig& config);

template <typename T>
struct ForwardOutput {
    std::vector<Tensor<T>> matching;   // H^0 .. H^L, each N x P
    std::vector<Tensor<T>> responses;  // M^0 .. M^L, each N x H x W
};

// visual: H x W x C_v, phrases: N x C_r. `rounds` defaults to config.rounds
// and may not exceed the number of parameterized rounds.
template <typename T>
ForwardOutput<T> forward(const Tensor<T>& visual, const Tensor<T>& phrases, const ModelParams<T>& p,
                         std::optional<std::size_t> rounds = std::nullopt);

}  // namespace ppmn
