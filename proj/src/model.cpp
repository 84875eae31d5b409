#include "ppmn/model.hpp"

#include <cmath>

#include "ppmn/rng.hpp"

namespace ppmn {

std::size_t ModelConfig::effective_groups() const {
    std::size_t g = std::max<std::size_t>(1, std::min(norm_groups, joint_dim));
    while (joint_dim % g != 0) --g;
    return g;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (visual_dim == 0 || phrase_dim == 0 || joint_dim == 0) fail("feature dimensions must be positive");
    if (heads == 0 || joint_dim % heads != 0) {
        fail("heads (" + std::to_string(heads) + ") must divide joint_dim (" + std::to_string(joint_dim) + ")");
    }
    if (compatible_pixels == 0) fail("compatible_pixels must be at least 1");
    if (norm_groups == 0) fail("norm_groups must be at least 1");
    if (gather == GatherSource::raw && visual_dim != joint_dim) {
        fail("gather=raw needs visual_dim == joint_dim");
    }
    if (positional_encoding && visual_dim % 2 != 0) fail("positional encoding needs an even visual_dim");
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
    config.validate();
    const std::size_t c = config.joint_dim;
    const std::size_t hd = config.head_dim();
    const std::size_t f = config.ffn_width();
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("proj.visual", Shape{config.visual_dim, c});
    out.emplace_back("proj.phrase", Shape{config.phrase_dim, c});
    for (std::size_t l = 0; l < config.rounds; ++l) {
        const std::string p = "round" + std::to_string(l) + ".";
        for (std::size_t d = 0; d < config.heads; ++d) {
            const std::string h = p + "head" + std::to_string(d) + ".";
            out.emplace_back(h + "query", Shape{hd, hd});
            out.emplace_back(h + "key", Shape{hd, hd});
            out.emplace_back(h + "value", Shape{hd, hd});
        }
        out.emplace_back(p + "ln_in.gamma", Shape{c});
        out.emplace_back(p + "ln_in.beta", Shape{c});
        out.emplace_back(p + "ffn.w1", Shape{c, f});
        out.emplace_back(p + "ffn.b1", Shape{f});
        out.emplace_back(p + "ffn.w2", Shape{f, c});
        out.emplace_back(p + "ffn.b2", Shape{c});
        out.emplace_back(p + "ln_out.gamma", Shape{c});
        out.emplace_back(p + "ln_out.beta", Shape{c});
        out.emplace_back(p + "visual.w", Shape{config.visual_dim, c});
        out.emplace_back(p + "visual.b", Shape{c});
        out.emplace_back(p + "gn.gamma", Shape{c});
        out.emplace_back(p + "gn.beta", Shape{c});
        for (std::size_t k = 0; k < 4; ++k) {
            out.emplace_back(p + "mlp" + std::to_string(k) + ".w", Shape{c, c});
            out.emplace_back(p + "mlp" + std::to_string(k) + ".b", Shape{c});
        }
    }
    return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
ModelParams<T> make_skeleton(const ModelConfig& config) {
    ModelParams<T> p;
    p.config = config;
    p.rounds.resize(config.rounds);
    for (auto& r : p.rounds) r.heads.resize(config.heads);
    return p;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    auto layout = parameter_layout(config);
    auto p = make_skeleton<T>(config);
    CounterRng rng(seed);
    std::size_t k = 0;
    p.visit([&](const std::string& name, Tensor<T>& t) {
        const Shape& shape = layout[k++].second;
        std::vector<T> data(numel(shape), T(0));
        if (shape.size() == 2) {
            const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
            for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
        } else if (ends_with(name, "gamma")) {
            std::fill(data.begin(), data.end(), T(1));
        }
        t = Tensor<T>::from(shape, std::move(data), true);
    });
    return p;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p, bool requires_grad) {
    auto out = make_skeleton<To>(p.config);
    std::vector<const Tensor<From>*> src;
    p.visit([&](const std::string&, const Tensor<From>& t) { src.push_back(&t); });
    std::size_t k = 0;
    out.visit([&](const std::string&, Tensor<To>& t) {
        const auto& s = *src[k++];
        std::vector<To> data(s.numel());
        auto v = s.data();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<To>(v[i]);
        t = Tensor<To>::from(s.shape(), std::move(data), requires_grad);
    });
    return out;
}

std::vector<double> positional_code(std::size_t height, std::size_t width, std::size_t channels) {
    if (channels % 2 != 0) {
        throw ConfigError("positional encoding needs an even channel count, got " + std::to_string(channels));
    }
    const std::size_t half = channels / 2;
    std::vector<double> code(height * width * channels);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            double* px = code.data() + (y * width + x) * channels;
            for (std::size_t part = 0; part < 2; ++part) {
                const double pos = static_cast<double>(part == 0 ? y : x);
                for (std::size_t j = 0; j < half; ++j) {
                    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(half));
                    px[part * half + j] = (j % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
                }
            }
        }
    }
    return code;
}

template <typename T>
Tensor<T> add_positional_encoding(const Tensor<T>& visual) {
    if (visual.rank() != 3) throw DimensionError("positional encoding expects H x W x C, got " + shape_str(visual.shape()));
    auto code = positional_code(visual.dim(0), visual.dim(1), visual.dim(2));
    std::vector<T> data(code.begin(), code.end());
    return add(visual, Tensor<T>::from(visual.shape(), std::move(data)));
}

template <typename T>
Projection<T> project_round0(const Tensor<T>& visual, const Tensor<T>& phrases, const ModelParams<T>& p) {
    if (visual.rank() != 3) throw DimensionError("visual features must be H x W x C_v, got " + shape_str(visual.shape()));
    if (phrases.rank() != 2) throw DimensionError("phrase features must be N x C_r, got " + shape_str(phrases.shape()));
    const std::size_t pixels = visual.dim(0) * visual.dim(1);
    auto flat = reshape(visual, {pixels, visual.dim(2)});
    return {linear(flat, p.visual_proj), linear(phrases, p.phrase_proj)};
}

template <typename T>
Tensor<T> match(const Tensor<T>& pixels, const Tensor<T>& phrases) {
    return matmul_nt(phrases, pixels);
}

template <typename T>
Tensor<T> respond(const Tensor<T>& matching, std::size_t height, std::size_t width) {
    if (matching.rank() != 2 || matching.dim(1) != height * width) {
        throw DimensionError("respond: matching maps " + shape_str(matching.shape()) + " do not cover a " +
                             std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    return reshape(sigmoid(matching), {matching.dim(0), height, width});
}

template <typename T>
RoundOutput<T> lcpa_round(const Tensor<T>& visual, const Tensor<T>& phrases, const Tensor<T>& matching,
                          const RoundParams<T>& p, const ModelConfig& config) {
    if (visual.rank() != 3) throw DimensionError("lcpa_round: visual features must be H x W x C_v");
    const std::size_t pixels = visual.dim(0) * visual.dim(1);
    const std::size_t c = config.joint_dim;
    const std::size_t s = config.compatible_pixels;
    if (s > pixels) {
        throw ConfigError("compatible_pixels S=" + std::to_string(s) + " exceeds the " + std::to_string(pixels) +
                          " pixels of the feature map");
    }
    if (phrases.rank() != 2 || phrases.dim(1) != c) {
        throw DimensionError("lcpa_round: phrase features must be N x " + std::to_string(c));
    }

    auto flat = reshape(visual, {pixels, visual.dim(2)});
    auto projected = relu(group_norm(linear(flat, p.visual_w, p.visual_b), config.effective_groups(),
                                     p.gn_gamma, p.gn_beta));

    IndexTensor idx = config.pool == PoolMode::bins ? binned_max_indices(matching, s) : topk_indices(matching, s);
    const Tensor<T>& source = config.gather == GatherSource::projected ? projected : flat;
    auto compatible = gather_pixels(source, idx);  // N x S x C

    const std::size_t hd = config.head_dim();
    const double width = config.attention_scale == AttentionScale::joint ? double(c) : double(hd);
    const T inv_scale = static_cast<T>(1.0 / std::sqrt(width));
    std::vector<Tensor<T>> head_out;
    head_out.reserve(config.heads);
    for (std::size_t d = 0; d < config.heads; ++d) {
        auto q_in = narrow(phrases, 1, d * hd, hd);
        auto kv_in = narrow(compatible, 2, d * hd, hd);
        auto q = linear(q_in, p.heads[d].query);
        auto k = linear(kv_in, p.heads[d].key);
        auto v = linear(kv_in, p.heads[d].value);
        auto weights = softmax(scale(batched_dot(q, k), inv_scale), 1);
        head_out.push_back(batched_combine(weights, v));
    }
    auto attended = add(concat<T>(std::span<const Tensor<T>>(head_out), 1), phrases);

    auto ffn = linear(relu(linear(layer_norm(attended, p.ln_in_gamma, p.ln_in_beta), p.ffn_w1, p.ffn_b1)),
                      p.ffn_w2, p.ffn_b2);
    auto refined = add(layer_norm(ffn, p.ln_out_gamma, p.ln_out_beta), attended);

    Tensor<T> x = refined;
    for (std::size_t k = 0; k < p.mlp_w.size(); ++k) {
        x = linear(x, p.mlp_w[k], p.mlp_b[k]);
        if (k + 1 < p.mlp_w.size()) x = relu(x);
    }
    return {refined, match(projected, x), std::move(idx)};
}

template <typename T>
ForwardOutput<T> forward(const Tensor<T>& visual, const Tensor<T>& phrases, const ModelParams<T>& p,
                         std::optional<std::size_t> rounds) {
    const auto& cfg = p.config;
    const std::size_t l_total = rounds.value_or(cfg.rounds);
    if (l_total > p.rounds.size()) {
        throw ConfigError("forward: requested " + std::to_string(l_total) + " rounds but parameters hold " +
                          std::to_string(p.rounds.size()));
    }
    if (visual.rank() != 3 || visual.dim(2) != cfg.visual_dim) {
        throw DimensionError("forward: visual features " + shape_str(visual.shape()) + " do not match C_v=" +
                             std::to_string(cfg.visual_dim));
    }
    if (phrases.rank() != 2 || phrases.dim(1) != cfg.phrase_dim) {
        throw DimensionError("forward: phrase features " + shape_str(phrases.shape()) + " do not match C_r=" +
                             std::to_string(cfg.phrase_dim));
    }
    const std::size_t h = visual.dim(0), w = visual.dim(1);
    Tensor<T> f = cfg.positional_encoding ? add_positional_encoding(visual) : visual;

    ForwardOutput<T> out;
    auto proj = project_round0(f, phrases, p);
    Tensor<T> r = proj.phrases;
    Tensor<T> hmap = match(proj.pixels, proj.phrases);
    out.matching.push_back(hmap);
    out.responses.push_back(respond(hmap, h, w));
    for (std::size_t l = 0; l < l_total; ++l) {
        auto step = lcpa_round(f, r, hmap, p.rounds[l], cfg);
        r = step.phrases;
        hmap = step.matching;
        out.matching.push_back(hmap);
        out.responses.push_back(respond(hmap, h, w));
    }
    return out;
}

#define PPMN_MODEL_INSTANTIATE(T)                                                                          \
    template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                             \
    template Tensor<T> add_positional_encoding<T>(const Tensor<T>&);                                       \
    template Projection<T> project_round0<T>(const Tensor<T>&, const Tensor<T>&, const ModelParams<T>&);   \
    template Tensor<T> match<T>(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> respond<T>(const Tensor<T>&, std::size_t, std::size_t);                             \
    template RoundOutput<T> lcpa_round<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                          const RoundParams<T>&, const ModelConfig&);                      \
    template ForwardOutput<T> forward<T>(const Tensor<T>&, const Tensor<T>&, const ModelParams<T>&,        \
                                         std::optional<std::size_t>);

PPMN_MODEL_INSTANTIATE(float)
PPMN_MODEL_INSTANTIATE(double)

template ModelParams<float> cast_params<float, float>(const ModelParams<float>&, bool);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&, bool);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&, bool);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&, bool);

#undef PPMN_MODEL_INSTANTIATE

}  // namespace ppmn
