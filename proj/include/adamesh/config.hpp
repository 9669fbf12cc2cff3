#pragma once

#include <fstream>
#include <set>

#include <json.hpp>

#include "adamesh/tensor.hpp"

namespace adamesh {

struct RunConfig {
    std::uint64_t seed = 0;  // mandatory in the file
    std::string corpus;
    std::string out;

    std::vector<std::size_t> ranks = {2, 4};

    // vector quantizer
    std::size_t vq_m = 64;
    std::size_t vq_dz = 16;
    std::size_t vq_w = 4;
    double vq_gamma = 0.25;
    double vq_alpha1 = 1.0;
    double vq_alpha2 = 1.0;

    // model dims
    std::size_t d = 64;
    std::size_t d_style = 16;
    std::size_t style_width = 32;
    std::size_t heads = 4;
    std::size_t gpt_layers = 2;

    // training
    std::size_t steps = 2000;
    std::size_t adapt_steps = 30;
    double lr = 1e-3;
    double adapt_lr = 0.01;

    // corpus generation
    std::size_t n_per_style = 10;
    std::size_t frames = 100;
};

namespace detail {
/// SAX handler that only watches object structure so duplicate keys surface
/// as errors (nlohmann's DOM silently keeps the last one).
struct DupKeyCheck : nlohmann::json::json_sax_t {
    std::vector<std::set<std::string>> scopes;
    std::string duplicate;

    bool key(string_t& val) override {
        if (!scopes.empty() && !scopes.back().insert(val).second) {
            duplicate = val;
            return false;
        }
        return true;
    }
    bool start_object(std::size_t) override {
        scopes.emplace_back();
        return true;
    }
    bool end_object() override {
        scopes.pop_back();
        return true;
    }
    bool null() override { return true; }
    bool boolean(bool) override { return true; }
    bool number_integer(number_integer_t) override { return true; }
    bool number_unsigned(number_unsigned_t) override { return true; }
    bool number_float(number_float_t, const string_t&) override { return true; }
    bool string(string_t&) override { return true; }
    bool binary(binary_t&) override { return true; }
    bool start_array(std::size_t) override { return true; }
    bool end_array() override { return true; }
    bool parse_error(std::size_t, const std::string&,
                     const nlohmann::json::exception& ex) override {
        throw ConfigError(std::string("config: ") + ex.what());
    }
};
}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
    detail::DupKeyCheck checker;
    if (!nlohmann::json::sax_parse(text, &checker)) {
        if (!checker.duplicate.empty())
            throw ConfigError("config: duplicate key \"" + checker.duplicate + "\"");
        throw ConfigError("config: parse failed");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("config: ") + ex.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be an object");

    RunConfig cfg;
    bool have_seed = false;
    std::set<std::string> known;
    auto take_uint = [&](const char* key, auto& field) {
        known.insert(key);
        if (!j.contains(key)) return;
        if (!j[key].is_number_unsigned())
            throw ConfigError(std::string("config: ") + key + " must be a non-negative integer");
        field = j[key].template get<std::uint64_t>();
    };
    auto take_double = [&](const char* key, double& field) {
        known.insert(key);
        if (!j.contains(key)) return;
        if (!j[key].is_number())
            throw ConfigError(std::string("config: ") + key + " must be a number");
        field = j[key].get<double>();
    };
    auto take_string = [&](const char* key, std::string& field) {
        known.insert(key);
        if (!j.contains(key)) return;
        if (!j[key].is_string())
            throw ConfigError(std::string("config: ") + key + " must be a string");
        field = j[key].get<std::string>();
    };

    known.insert("seed");
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned())
            throw ConfigError("config: seed must be a non-negative integer");
        cfg.seed = j["seed"].get<std::uint64_t>();
        have_seed = true;
    }
    known.insert("ranks");
    if (j.contains("ranks")) {
        if (!j["ranks"].is_array()) throw ConfigError("config: ranks must be an array");
        cfg.ranks.clear();
        for (const auto& r : j["ranks"]) {
            if (!r.is_number_unsigned() || r.get<std::uint64_t>() == 0)
                throw ConfigError("config: ranks must be positive integers");
            cfg.ranks.push_back(r.get<std::size_t>());
        }
    }
    take_string("corpus", cfg.corpus);
    take_string("out", cfg.out);
    take_uint("vq_m", cfg.vq_m);
    take_uint("vq_dz", cfg.vq_dz);
    take_uint("vq_w", cfg.vq_w);
    take_double("vq_gamma", cfg.vq_gamma);
    take_double("vq_alpha1", cfg.vq_alpha1);
    take_double("vq_alpha2", cfg.vq_alpha2);
    take_uint("d", cfg.d);
    take_uint("d_style", cfg.d_style);
    take_uint("style_width", cfg.style_width);
    take_uint("heads", cfg.heads);
    take_uint("gpt_layers", cfg.gpt_layers);
    take_uint("steps", cfg.steps);
    take_uint("adapt_steps", cfg.adapt_steps);
    take_double("lr", cfg.lr);
    take_double("adapt_lr", cfg.adapt_lr);
    take_uint("n_per_style", cfg.n_per_style);
    take_uint("frames", cfg.frames);

    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("config: unknown key \"" + it.key() + "\"");
    if (!have_seed) throw ConfigError("config: missing mandatory key \"seed\"");

    std::set<std::size_t> seen;
    for (auto r : cfg.ranks) {
        if (!seen.insert(r).second)
            throw ConfigError("config: duplicate rank " + std::to_string(r));
        if (cfg.d % r != 0)
            throw ConfigError("config: rank " + std::to_string(r) + " does not divide d=" +
                              std::to_string(cfg.d));
    }
    return cfg;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(is)), {});
    return parse_config_text(text);
}

inline std::string config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["corpus"] = c.corpus;
    j["out"] = c.out;
    j["ranks"] = c.ranks;
    j["vq_m"] = c.vq_m;
    j["vq_dz"] = c.vq_dz;
    j["vq_w"] = c.vq_w;
    j["vq_gamma"] = c.vq_gamma;
    j["vq_alpha1"] = c.vq_alpha1;
    j["vq_alpha2"] = c.vq_alpha2;
    j["d"] = c.d;
    j["d_style"] = c.d_style;
    j["style_width"] = c.style_width;
    j["heads"] = c.heads;
    j["gpt_layers"] = c.gpt_layers;
    j["steps"] = c.steps;
    j["adapt_steps"] = c.adapt_steps;
    j["lr"] = c.lr;
    j["adapt_lr"] = c.adapt_lr;
    j["n_per_style"] = c.n_per_style;
    j["frames"] = c.frames;
    return j.dump(2);
}

}  // namespace adamesh
