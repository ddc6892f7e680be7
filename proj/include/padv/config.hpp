// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: a flat key-value document with [section]
// headers. Grammar:
//
//   [section]            # section header
//   key = value          # keys live in the enclosing section
//   # comment            # hash starts a comment anywhere
//
// Every key must belong to the known set; unknown keys are rejected so a
// typo cannot silently fall back to a default. The canonical serialization
// (sorted keys, resolved defaults) is what gets hashed, and that hash is
// embedded in every artifact a run produces.

#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include "padv/common.hpp"

namespace padv {

struct ExperimentConfig {
    // dataset
    std::string dataset_source = "gen";  // gen | ingest
    std::string dataset_root;            // class-subfolder PNG tree for ingest
    int dataset_classes = 10;
    int dataset_per_class = 100;
    int dataset_size = 64;

    // training
    int classifier_epochs = 60;
    float classifier_lr = 0.02f;
    float classifier_adv_eps = 0.05f;  // low-frequency adversarial augmentation amplitude
    int proxy_epochs = 30;
    float proxy_lr = 1e-3f;
    int local_finetune_epochs = 80;
    int local_augmentations = 12;
    int local_seeds = 50;  // images used to harvest local-proxy queries

    // attack
    std::string attack_domain = "raw";  // raw | display
    float attack_epsilon = 2000.f / 65535.f;
    float attack_alpha = 50.f / 65535.f;
    int attack_steps = 30;
    std::string attack_target_policy = "random";  // random | untargeted | fixed:<k>
    float attack_lambda = 1.f;

    // eval
    int eval_images = 200;
    float confidence_threshold = 0.15f;
    bool transfer_on_success_only = false;  // alternative transfer-rate denominator

    // run
    uint64_t seed = 7;
    int jobs = 1;

    static const std::map<std::string, std::string>& known_keys();
    static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv);
    static ExperimentConfig from_file(const std::string& path);
    std::map<std::string, std::string> to_kv() const;
    std::string canonical() const;
    uint64_t hash() const { return fnv1a(canonical()); }
    void validate() const;
};

namespace detail {

inline std::string trim_str(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace detail

inline const std::map<std::string, std::string>& ExperimentConfig::known_keys() {
    // key -> section, used both for validation and serialization
    static const std::map<std::string, std::string> keys = {
        {"dataset.source", "dataset"},
        {"dataset.root", "dataset"},
        {"dataset.classes", "dataset"},
        {"dataset.per_class", "dataset"},
        {"dataset.size", "dataset"},
        {"training.classifier_epochs", "training"},
        {"training.classifier_lr", "training"},
        {"training.classifier_adv_eps", "training"},
        {"training.proxy_epochs", "training"},
        {"training.proxy_lr", "training"},
        {"training.local_finetune_epochs", "training"},
        {"training.local_augmentations", "training"},
        {"training.local_seeds", "training"},
        {"attack.domain", "attack"},
        {"attack.epsilon", "attack"},
        {"attack.alpha", "attack"},
        {"attack.steps", "attack"},
        {"attack.target_policy", "attack"},
        {"attack.lambda", "attack"},
        {"eval.images", "eval"},
        {"eval.confidence_threshold", "eval"},
        {"eval.transfer_on_success_only", "eval"},
        {"run.seed", "run"},
        {"run.jobs", "run"},
    };
    return keys;
}

inline std::map<std::string, std::string> ExperimentConfig::to_kv() const {
    auto f = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };
    return {
        {"dataset.source", dataset_source},
        {"dataset.root", dataset_root},
        {"dataset.classes", std::to_string(dataset_classes)},
        {"dataset.per_class", std::to_string(dataset_per_class)},
        {"dataset.size", std::to_string(dataset_size)},
        {"training.classifier_epochs", std::to_string(classifier_epochs)},
        {"training.classifier_lr", f(classifier_lr)},
        {"training.classifier_adv_eps", f(classifier_adv_eps)},
        {"training.proxy_epochs", std::to_string(proxy_epochs)},
        {"training.proxy_lr", f(proxy_lr)},
        {"training.local_finetune_epochs", std::to_string(local_finetune_epochs)},
        {"training.local_augmentations", std::to_string(local_augmentations)},
        {"training.local_seeds", std::to_string(local_seeds)},
        {"attack.domain", attack_domain},
        {"attack.epsilon", f(attack_epsilon)},
        {"attack.alpha", f(attack_alpha)},
        {"attack.steps", std::to_string(attack_steps)},
        {"attack.target_policy", attack_target_policy},
        {"attack.lambda", f(attack_lambda)},
        {"eval.images", std::to_string(eval_images)},
        {"eval.confidence_threshold", f(confidence_threshold)},
        {"eval.transfer_on_success_only", transfer_on_success_only ? "1" : "0"},
        {"run.seed", std::to_string(seed)},
        {"run.jobs", std::to_string(jobs)},
    };
}

inline ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv)
        if (!known_keys().count(k)) throw Error("config: unknown key '" + k + "'");
    ExperimentConfig c;
    auto get = [&](const std::string& k) -> const std::string* {
        auto it = kv.find(k);
        return it == kv.end() ? nullptr : &it->second;
    };
    auto s = [&](const std::string& k, std::string& out) { if (auto* v = get(k)) out = *v; };
    auto i = [&](const std::string& k, int& out) { if (auto* v = get(k)) out = std::stoi(*v); };
    auto fl = [&](const std::string& k, float& out) { if (auto* v = get(k)) out = std::stof(*v); };
    s("dataset.source", c.dataset_source);
    s("dataset.root", c.dataset_root);
    i("dataset.classes", c.dataset_classes);
    i("dataset.per_class", c.dataset_per_class);
    i("dataset.size", c.dataset_size);
    i("training.classifier_epochs", c.classifier_epochs);
    fl("training.classifier_lr", c.classifier_lr);
    fl("training.classifier_adv_eps", c.classifier_adv_eps);
    i("training.proxy_epochs", c.proxy_epochs);
    fl("training.proxy_lr", c.proxy_lr);
    i("training.local_finetune_epochs", c.local_finetune_epochs);
    i("training.local_augmentations", c.local_augmentations);
    i("training.local_seeds", c.local_seeds);
    s("attack.domain", c.attack_domain);
    fl("attack.epsilon", c.attack_epsilon);
    fl("attack.alpha", c.attack_alpha);
    i("attack.steps", c.attack_steps);
    s("attack.target_policy", c.attack_target_policy);
    fl("attack.lambda", c.attack_lambda);
    i("eval.images", c.eval_images);
    fl("eval.confidence_threshold", c.confidence_threshold);
    if (auto* v = get("eval.transfer_on_success_only")) c.transfer_on_success_only = (*v == "1" || *v == "true");
    if (auto* v = get("run.seed")) c.seed = std::stoull(*v);
    i("run.jobs", c.jobs);
    c.validate();
    return c;
}

inline ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config " + path);
    std::map<std::string, std::string> kv;
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim_str(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = detail::trim_str(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = detail::trim_str(line.substr(0, eq));
        if (section.empty())
            throw Error(path + ":" + std::to_string(lineno) + ": key '" + key +
                        "' outside any [section]");
        kv[section + "." + key] = detail::trim_str(line.substr(eq + 1));
    }
    return from_kv(kv);
}

inline std::string ExperimentConfig::canonical() const {
    std::string out;
    std::string section;
    for (const auto& [k, v] : to_kv()) {  // std::map: sorted, stable
        std::string sec = k.substr(0, k.find('.'));
        if (sec != section) {
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += k.substr(k.find('.') + 1) + " = " + v + "\n";
    }
    return out;
}

inline void ExperimentConfig::validate() const {
    if (dataset_source != "gen" && dataset_source != "ingest")
        throw Error("config: dataset.source must be gen|ingest, got '" + dataset_source + "'");
    if (dataset_source == "ingest" && dataset_root.empty())
        throw Error("config: dataset.root required when dataset.source = ingest");
    if (dataset_classes < 2) throw Error("config: dataset.classes must be >= 2");
    if (dataset_size < 16 || dataset_size % 16)
        throw Error("config: dataset.size must be a positive multiple of 16");
    if (attack_domain != "raw" && attack_domain != "display")
        throw Error("config: attack.domain must be raw|display, got '" + attack_domain + "'");
    if (!(attack_epsilon > 0.f) || !(attack_alpha > 0.f))
        throw Error("config: attack.epsilon and attack.alpha must be positive");
    if (attack_steps < 1) throw Error("config: attack.steps must be >= 1");
    bool fixed = attack_target_policy.rfind("fixed:", 0) == 0;
    if (attack_target_policy != "random" && attack_target_policy != "untargeted" && !fixed)
        throw Error("config: attack.target_policy must be random|untargeted|fixed:<k>");
    if (fixed) {
        int k = std::stoi(attack_target_policy.substr(6));
        if (k < 0 || k >= dataset_classes)
            throw Error("config: fixed target class out of range");
    }
    if (eval_images < 1) throw Error("config: eval.images must be >= 1");
    if (jobs < 1) throw Error("config: run.jobs must be >= 1");
}

}  // namespace padv
