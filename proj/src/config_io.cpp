#include "ppmn/config_io.hpp"

#include <algorithm>

#include "ppmn/errors.hpp"

namespace ppmn {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
        if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

namespace {

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + ": key '" + key + "' has the wrong type");
    }
}

template <typename E>
E read_enum(const nlohmann::json& j, const char* key, E current, std::initializer_list<std::pair<const char*, E>> names,
            const std::string& where) {
    if (!j.contains(key)) return current;
    if (!j.at(key).is_string()) throw ConfigError(where + ": key '" + key + "' must be a string");
    const auto s = j.at(key).get<std::string>();
    for (const auto& [n, v] : names) {
        if (s == n) return v;
    }
    throw ConfigError(where + ": unknown value '" + s + "' for '" + key + "'");
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
    return {
        {"visual_dim", c.visual_dim},
        {"phrase_dim", c.phrase_dim},
        {"joint_dim", c.joint_dim},
        {"heads", c.heads},
        {"compatible_pixels", c.compatible_pixels},
        {"rounds", c.rounds},
        {"ffn_hidden", c.ffn_hidden},
        {"norm_groups", c.norm_groups},
        {"positional_encoding", c.positional_encoding},
        {"pool", c.pool == PoolMode::bins ? "bins" : "topk"},
        {"gather", c.gather == GatherSource::projected ? "projected" : "raw"},
        {"attention_scale", c.attention_scale == AttentionScale::joint ? "joint" : "per_head"},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    const std::string where = "model config";
    reject_unknown_keys(j,
                        {"visual_dim", "phrase_dim", "joint_dim", "heads", "compatible_pixels", "rounds", "ffn_hidden",
                         "norm_groups", "positional_encoding", "pool", "gather", "attention_scale"},
                        where);
    ModelConfig c;
    read(j, "visual_dim", c.visual_dim, where);
    read(j, "phrase_dim", c.phrase_dim, where);
    read(j, "joint_dim", c.joint_dim, where);
    read(j, "heads", c.heads, where);
    read(j, "compatible_pixels", c.compatible_pixels, where);
    read(j, "rounds", c.rounds, where);
    read(j, "ffn_hidden", c.ffn_hidden, where);
    read(j, "norm_groups", c.norm_groups, where);
    read(j, "positional_encoding", c.positional_encoding, where);
    c.pool = read_enum(j, "pool", c.pool, {{"bins", PoolMode::bins}, {"topk", PoolMode::topk}}, where);
    c.gather = read_enum(j, "gather", c.gather, {{"projected", GatherSource::projected}, {"raw", GatherSource::raw}}, where);
    c.attention_scale = read_enum(j, "attention_scale", c.attention_scale,
                                  {{"joint", AttentionScale::joint}, {"per_head", AttentionScale::per_head}}, where);
    c.validate();
    return c;
}

nlohmann::json to_json(const LossConfig& c) {
    return {
        {"bce_weight", c.bce_weight},
        {"dice_weight", c.dice_weight},
        {"dice_eps", c.dice_eps},
        {"supervise", c.supervise == SupervisionPolicy::all_rounds ? "all_rounds" : "skip_final"},
    };
}

LossConfig loss_config_from_json(const nlohmann::json& j) {
    const std::string where = "loss config";
    reject_unknown_keys(j, {"bce_weight", "dice_weight", "dice_eps", "supervise"}, where);
    LossConfig c;
    read(j, "bce_weight", c.bce_weight, where);
    read(j, "dice_weight", c.dice_weight, where);
    read(j, "dice_eps", c.dice_eps, where);
    c.supervise = read_enum(j, "supervise", c.supervise,
                            {{"all_rounds", SupervisionPolicy::all_rounds},
                             {"skip_final", SupervisionPolicy::skip_final}},
                            where);
    c.validate();
    return c;
}

nlohmann::json to_json(const SceneConfig& c) {
    nlohmann::json j = {
        {"height", c.height},
        {"width", c.width},
        {"num_phrases", c.num_phrases},
        {"num_classes", c.num_classes},
        {"visual_dim", c.visual_dim},
        {"phrase_dim", c.phrase_dim},
        {"things_fraction", c.things_fraction},
        {"plural_fraction", c.plural_fraction},
        {"ungrounded_fraction", c.ungrounded_fraction},
        {"noise_sigma", c.noise_sigma},
        {"appearance_jitter", c.appearance_jitter},
        {"max_words", c.max_words},
        {"seed", c.seed},
    };
    if (c.codebook_seed) j["codebook_seed"] = *c.codebook_seed;
    return j;
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
    const std::string where = "scene config";
    reject_unknown_keys(j,
                        {"height", "width", "num_phrases", "num_classes", "visual_dim", "phrase_dim",
                         "things_fraction", "plural_fraction", "ungrounded_fraction", "noise_sigma",
                         "appearance_jitter", "max_words", "seed", "codebook_seed"},
                        where);
    SceneConfig c;
    read(j, "height", c.height, where);
    read(j, "width", c.width, where);
    read(j, "num_phrases", c.num_phrases, where);
    read(j, "num_classes", c.num_classes, where);
    read(j, "visual_dim", c.visual_dim, where);
    read(j, "phrase_dim", c.phrase_dim, where);
    read(j, "things_fraction", c.things_fraction, where);
    read(j, "plural_fraction", c.plural_fraction, where);
    read(j, "ungrounded_fraction", c.ungrounded_fraction, where);
    read(j, "noise_sigma", c.noise_sigma, where);
    read(j, "appearance_jitter", c.appearance_jitter, where);
    read(j, "max_words", c.max_words, where);
    read(j, "seed", c.seed, where);
    if (j.contains("codebook_seed")) {
        std::uint64_t s = 0;
        read(j, "codebook_seed", s, where);
        c.codebook_seed = s;
    }
    c.validate();
    return c;
}

}  // namespace ppmn
