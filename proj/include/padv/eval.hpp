// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Experiment harness: craft attacks against each pipeline's proxy, replay
// the adversarial inputs through every *true* pipeline, and aggregate
// success / transfer / confidence-shift matrices.

#pragma once

#include <json.hpp>

#include "padv/attack.hpp"
#include "padv/config.hpp"

namespace padv {

using nlohmann::json;

/// One pipeline's view of one attacked image.
struct ImageOutcome {
    int clean_pred = -1;
    float clean_conf = 0.f;  // probability of the clean top class
    int adv_pred = -1;
    float adv_conf = 0.f;  // probability of the *clean* top class on x'
};

struct ImageRecord {
    int index = -1;
    int label = -1;
    int target = -1;  // -1 for untargeted
    std::map<std::string, ImageOutcome> outcomes;  // keyed by deployed pipeline id
};

struct CellStats {
    double success = 0;     // diagonal: attack success on the attacked pipeline
    double transfer = 0;    // off-diagonal: deployed pipeline's prediction changed
    double conf_shift = 0;  // |conf(clean top) - conf(same class on x')| > threshold
    int n = 0;
};

struct EvalReport {
    std::vector<std::string> attacked;  // row ids
    std::vector<std::string> deployed;  // column ids
    std::vector<std::vector<CellStats>> cells;
    std::map<std::string, std::string> metadata;
    std::vector<std::pair<std::string, std::vector<ImageRecord>>> records;  // per attacked row

    std::string to_csv() const;
    json to_json() const;
};

// ---- scalar metrics ----

inline double success_rate(const std::vector<ImageRecord>& rows, const std::string& pipeline) {
    if (rows.empty()) throw Error("success_rate: empty result set");
    int hit = 0;
    for (const auto& r : rows) {
        const auto& o = r.outcomes.at(pipeline);
        hit += (r.target >= 0) ? (o.adv_pred == r.target) : (o.adv_pred != o.clean_pred);
    }
    return double(hit) / double(rows.size());
}

/// (prediction-change rate, confidence-shift rate) on a non-attacked pipeline.
inline std::pair<double, double> transfer_rate(const std::vector<ImageRecord>& rows,
                                               const std::string& pipeline,
                                               float threshold = 0.15f) {
    if (rows.empty()) throw Error("transfer_rate: empty result set");
    int flips = 0, shifts = 0;
    for (const auto& r : rows) {
        const auto& o = r.outcomes.at(pipeline);
        if (o.clean_pred < 0) throw Error("transfer_rate: missing clean baseline for " + pipeline);
        flips += (o.adv_pred != o.clean_pred);
        shifts += (std::abs(o.clean_conf - o.adv_conf) > threshold);
    }
    return {double(flips) / double(rows.size()), double(shifts) / double(rows.size())};
}

/// Strict isolation: the attacked pipeline says the target class while every
/// other pipeline keeps its clean class within the confidence threshold.
inline double targeted_success_rate(const std::vector<ImageRecord>& rows,
                                    const std::string& attacked_pipeline, float threshold = 0.15f) {
    if (rows.empty()) throw Error("targeted_success_rate: empty result set");
    int hit = 0;
    for (const auto& r : rows) {
        if (r.target < 0) throw Error("targeted_success_rate: untargeted record");
        bool ok = r.outcomes.at(attacked_pipeline).adv_pred == r.target;
        for (const auto& [id, o] : r.outcomes) {
            if (id == attacked_pipeline) continue;
            ok = ok && o.adv_pred == o.clean_pred && std::abs(o.clean_conf - o.adv_conf) < threshold;
        }
        hit += ok;
    }
    return double(hit) / double(rows.size());
}

// ---- matrix experiments ----

/// A deployable pipeline paired with the differentiable stand-in used to
/// attack it (a learned proxy for black boxes, the true graph otherwise).
struct EvalPipeline {
    std::string id;
    IspHandle isp;
    PipelineFn attack_fn;
};

namespace detail {

inline ImageOutcome judge(const ClassifierModel& g, const RgbImage& clean_out,
                          const RgbImage& adv_out) {
    ImageOutcome o;
    auto pc = predict(g, clean_out);
    o.clean_pred = argmax_class(pc);
    o.clean_conf = pc[o.clean_pred];
    auto pa = predict(g, adv_out);
    o.adv_pred = argmax_class(pa);
    o.adv_conf = pa[o.clean_pred];
    return o;
}

inline void aggregate(EvalReport& rep, float threshold) {
    rep.cells.assign(rep.attacked.size(), std::vector<CellStats>(rep.deployed.size()));
    for (size_t i = 0; i < rep.attacked.size(); ++i) {
        const auto& rows = rep.records[i].second;
        for (size_t j = 0; j < rep.deployed.size(); ++j) {
            CellStats& c = rep.cells[i][j];
            c.n = int(rows.size());
            c.success = success_rate(rows, rep.deployed[j]);
            auto [tr, cs] = transfer_rate(rows, rep.deployed[j], threshold);
            c.transfer = tr;
            c.conf_shift = cs;
        }
    }
}

}  // namespace detail

/// Raw-domain matrix: for every pipeline, attack each image through that
/// pipeline's proxy, then deploy the adversarial RAW on all pipelines.
/// Targets are drawn per image (never the clean class); `targeted` also
/// adds the isolation terms against all other proxies.
inline EvalReport run_isp_matrix(const ClassifierModel& classifier,
                                 const std::vector<EvalPipeline>& pipelines,
                                 const std::vector<RawImage>& images, const AttackConfig& base_cfg,
                                 bool targeted, uint64_t seed, float threshold = 0.15f,
                                 const AttackObserver& observer = nullptr) {
    if (pipelines.empty()) throw Error("run_isp_matrix: no pipelines");
    if (images.empty()) throw Error("run_isp_matrix: no images");
    for (const auto& p : pipelines)
        if (!p.attack_fn)
            throw Error("run_isp_matrix: pipeline '" + p.id + "' has no attack stand-in");

    EvalReport rep;
    for (const auto& p : pipelines) {
        rep.attacked.push_back(p.id);
        rep.deployed.push_back(p.id);
    }

    // clean outputs of every pipeline for every image, computed once
    std::vector<std::vector<RgbImage>> clean(pipelines.size());
    for (size_t j = 0; j < pipelines.size(); ++j)
        for (const auto& x : images) clean[j].push_back(pipelines[j].isp.evaluate(x));

    for (size_t i = 0; i < pipelines.size(); ++i) {
        std::vector<ImageRecord> rows;
        for (size_t n = 0; n < images.size(); ++n) {
            const RawImage& x = images[n];
            Rng rng = Rng::keyed(seed, fnv1a(pipelines[i].id) ^ (0x9e37 + n));
            AttackConfig cfg = base_cfg;
            cfg.seed = rng.next();

            ImageRecord rec;
            rec.index = int(n);
            int clean_pred_i = decide(classifier, clean[i][n]);

            RawImage adv = x;
            if (targeted) {
                int t = rng.randint(classifier.num_classes - 1);
                if (t >= clean_pred_i) ++t;
                cfg.target = t;
                rec.target = t;
                std::vector<AuxiliaryPipeline> aux;
                for (size_t k = 0; k < pipelines.size(); ++k)
                    if (k != i) aux.push_back({pipelines[k].id, pipelines[k].attack_fn});
                cfg.lambdas.assign(aux.size(), base_cfg.lambdas.empty() ? 1.f : base_cfg.lambdas[0]);
                adv = targeted_attack(classifier, pipelines[i].attack_fn, aux, x, cfg, observer)
                          .adversarial;
            } else {
                cfg.target = -1;
                adv = untargeted_attack(classifier, pipelines[i].attack_fn, x, cfg, observer)
                          .adversarial;
            }
            for (size_t j = 0; j < pipelines.size(); ++j)
                rec.outcomes[pipelines[j].id] =
                    detail::judge(classifier, clean[j][n], pipelines[j].isp.evaluate(adv));
            rows.push_back(std::move(rec));
        }
        rep.records.emplace_back(pipelines[i].id, std::move(rows));
    }
    detail::aggregate(rep, threshold);
    rep.metadata["mode"] = targeted ? "targeted" : "untargeted";
    rep.metadata["images"] = std::to_string(images.size());
    rep.metadata["seed"] = std::to_string(seed);
    return rep;
}

/// A capture chain paired with the ISP stand-in used to attack it.
struct EvalChain {
    std::string id;
    CaptureChain chain;
    PipelineFn attack_fn;
};

/// Display-domain matrix: attack each chain through lens+proxy gradients,
/// then show the adversarial display image to every true chain.
inline EvalReport run_optics_matrix(const ClassifierModel& classifier,
                                    const std::vector<EvalChain>& chains,
                                    const std::vector<RgbImage>& displays,
                                    const AttackConfig& base_cfg, uint64_t seed,
                                    float threshold = 0.15f,
                                    const AttackObserver& observer = nullptr) {
    if (chains.empty()) throw Error("run_optics_matrix: no chains");
    if (displays.empty()) throw Error("run_optics_matrix: no images");
    for (const auto& c : chains)
        if (!c.attack_fn)
            throw Error("run_optics_matrix: chain '" + c.id + "' has no attack stand-in");

    EvalReport rep;
    for (const auto& c : chains) {
        rep.attacked.push_back(c.id);
        rep.deployed.push_back(c.id);
    }

    std::vector<std::vector<RgbImage>> clean(chains.size());
    for (size_t j = 0; j < chains.size(); ++j)
        for (const auto& d : displays) clean[j].push_back(chains[j].chain.evaluate(d));

    for (size_t i = 0; i < chains.size(); ++i) {
        std::vector<ImageRecord> rows;
        for (size_t n = 0; n < displays.size(); ++n) {
            Rng rng = Rng::keyed(seed, fnv1a(chains[i].id) ^ (0x51ab + n));
            AttackConfig cfg = base_cfg;
            cfg.seed = rng.next();
            int clean_pred_i = decide(classifier, clean[i][n]);
            int t = rng.randint(classifier.num_classes - 1);
            if (t >= clean_pred_i) ++t;
            cfg.target = t;

            auto res = display_attack(classifier, chains[i].attack_fn, chains[i].chain.lens,
                                      chains[i].chain.exposure_gain, displays[n], cfg,
                                      chains[i].chain.cfa, chains[i].chain.white_level, observer);
            ImageRecord rec;
            rec.index = int(n);
            rec.target = t;
            for (size_t j = 0; j < chains.size(); ++j)
                rec.outcomes[chains[j].id] = detail::judge(
                    classifier, clean[j][n], chains[j].chain.evaluate(res.adversarial));
            rows.push_back(std::move(rec));
        }
        rep.records.emplace_back(chains[i].id, std::move(rows));
    }
    detail::aggregate(rep, threshold);
    rep.metadata["mode"] = "optics-targeted";
    rep.metadata["images"] = std::to_string(displays.size());
    rep.metadata["seed"] = std::to_string(seed);
    return rep;
}

// ---- serialization ----

inline std::string EvalReport::to_csv() const {
    // fixed float formatting keeps reruns byte-identical
    auto f = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", v);
        return std::string(buf);
    };
    std::string out = "attacked";
    for (const auto& d : deployed) out += "," + d + "_success," + d + "_transfer," + d + "_confshift";
    out += "\n";
    for (size_t i = 0; i < attacked.size(); ++i) {
        out += attacked[i];
        for (size_t j = 0; j < deployed.size(); ++j) {
            const auto& c = cells[i][j];
            out += "," + f(c.success) + "," + f(c.transfer) + "," + f(c.conf_shift);
        }
        out += "\n";
    }
    std::vector<std::pair<std::string, std::string>> meta(metadata.begin(), metadata.end());
    for (const auto& [k, v] : meta) out += "# " + k + " = " + v + "\n";
    return out;
}

inline json EvalReport::to_json() const {
    json j;
    j["attacked"] = attacked;
    j["deployed"] = deployed;
    j["metadata"] = metadata;
    j["cells"] = json::array();
    for (size_t i = 0; i < attacked.size(); ++i) {
        json row = json::array();
        for (size_t jj = 0; jj < deployed.size(); ++jj) {
            const auto& c = cells[i][jj];
            row.push_back({{"success", c.success},
                           {"transfer", c.transfer},
                           {"conf_shift", c.conf_shift},
                           {"n", c.n}});
        }
        j["cells"].push_back(row);
    }
    j["records"] = json::array();
    for (const auto& [id, rows] : records) {
        json jr;
        jr["attacked"] = id;
        jr["images"] = json::array();
        for (const auto& r : rows) {
            json ji{{"index", r.index}, {"target", r.target}};
            for (const auto& [pid, o] : r.outcomes)
                ji["outcomes"][pid] = {{"clean_pred", o.clean_pred},
                                       {"clean_conf", o.clean_conf},
                                       {"adv_pred", o.adv_pred},
                                       {"adv_conf", o.adv_conf}};
            jr["images"].push_back(std::move(ji));
        }
        j["records"].push_back(std::move(jr));
    }
    return j;
}

}  // namespace padv
