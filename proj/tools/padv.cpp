// Copyright Contributors to the pipeline-adversary project.
// SPDX-License-Identifier: Apache-2.0

// Operator entry point. Workflow:
//   gen-data -> train-classifier -> train-proxy (x4) -> local-proxy (x2)
//     -> attack / evaluate -> report
// Every artifact written under --run-dir embeds the hash of the resolved
// config; `evaluate` refuses to mix artifacts from different configs
// unless --allow-mixed is passed. Errors leave a machine-readable JSON
// record on stderr and a nonzero exit status.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "padv/eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace padv;

namespace {

struct Ctx {
    ExperimentConfig cfg;
    std::string run_dir = "run";
    std::string presets = PADV_PRESET_DIR;
    int jobs = 1;
    bool allow_mixed = false;
    bool verbose = false;

    std::string hash_hex() const { return hex64(cfg.hash()); }
    std::string path(const std::string& name) const { return run_dir + "/" + name; }
};

void resolve_config(Ctx& ctx, const std::string& config_path) {
    if (!config_path.empty()) ctx.cfg = ExperimentConfig::from_file(config_path);
    if (const char* env = std::getenv("PIPELINE_ADVERSARY_SEED")) ctx.cfg.seed = std::stoull(env);
    ctx.cfg.validate();
    fs::create_directories(ctx.run_dir);
    std::ofstream(ctx.path("resolved.cfg")) << ctx.cfg.canonical();
    if (ctx.verbose) std::cerr << "config " << ctx.hash_hex() << "\n" << ctx.cfg.canonical();
}

LabeledDataset load_dataset(const Ctx& ctx) {
    if (ctx.cfg.dataset_source == "ingest")
        return ingest_dataset(ctx.cfg.dataset_root, ctx.cfg.dataset_size);
    return generate_dataset(ctx.cfg.seed, ctx.cfg.dataset_per_class, ctx.cfg.dataset_classes,
                            ctx.cfg.dataset_size);
}

std::vector<std::pair<std::string, IspHandle>> make_pipelines(const Ctx& ctx) {
    return {{"demosaic", make_demosaic_isp()},
            {"bilateral", make_bilateral_isp()},
            {"isp_a", make_blackbox_a(IspAParams::from_preset(ctx.presets + "/isp_a.preset"))},
            {"isp_b", make_blackbox_b(IspBParams::from_preset(ctx.presets + "/isp_b.preset"))}};
}

IspHandle find_pipeline(const Ctx& ctx, const std::string& id) {
    for (auto& [pid, isp] : make_pipelines(ctx))
        if (pid == id) return isp;
    throw Error("unknown pipeline '" + id + "' (expected demosaic|bilateral|isp_a|isp_b)");
}

std::vector<RawImage> split_raws(const LabeledDataset& ds, Split split, int limit = -1) {
    std::vector<RawImage> out;
    for (const auto* it : ds.split_items(split)) {
        if (limit >= 0 && int(out.size()) >= limit) break;
        out.push_back(mosaic(it->image));
    }
    return out;
}

void require_artifact(const std::string& path, const std::string& produced_by) {
    if (!fs::exists(path))
        throw Error("missing artifact " + path + " (run `padv " + produced_by + "` first)");
}

std::string ckpt_hash(const std::string& path) {
    std::string meta;
    load_checkpoint(path, &meta);
    auto pos = meta.find("cfg=");
    if (pos == std::string::npos) return "";
    return meta.substr(pos + 4, 16);
}

void check_hash(const Ctx& ctx, const std::string& path) {
    std::string h = ckpt_hash(path);
    if (h != ctx.hash_hex() && !ctx.allow_mixed)
        throw Error(path + " was produced under config " + h + " but the current config is " +
                    ctx.hash_hex() + "; rerun training or pass --allow-mixed");
}

std::string proxy_name(const std::string& isp_id, bool local) {
    return (local ? "local_" : "proxy_") + isp_id + ".ckpt";
}

bool is_blackbox(const std::string& isp_id) { return isp_id == "isp_a" || isp_id == "isp_b"; }

/// The proxy the attack should use for a pipeline: local if trained, else base.
ProxyModel load_attack_proxy(const Ctx& ctx, const std::string& isp_id) {
    std::string local = ctx.path(proxy_name(isp_id, true));
    if (fs::exists(local)) {
        check_hash(ctx, local);
        return load_proxy(local);
    }
    std::string base = ctx.path(proxy_name(isp_id, false));
    require_artifact(base, "train-proxy --isp " + isp_id);
    check_hash(ctx, base);
    return load_proxy(base);
}

// ---- subcommands ----

int cmd_gen_data(Ctx& ctx) {
    auto ds = load_dataset(ctx);
    const char* names[] = {"train", "val", "test"};
    std::map<int, int> counters;
    for (const auto& it : ds.items) {
        std::string dir = ctx.path("dataset/class_" + std::to_string(it.label));
        fs::create_directories(dir);
        char name[64];
        std::snprintf(name, sizeof name, "%s/%05d_%s.png", dir.c_str(), counters[it.label]++,
                      names[int(it.split)]);
        write_png(name, it.image);
    }
    json manifest{{"config_hash", ctx.hash_hex()},
                  {"items", ds.items.size()},
                  {"classes", ds.num_classes},
                  {"size", ctx.cfg.dataset_size},
                  {"seed", ctx.cfg.seed}};
    std::ofstream(ctx.path("dataset/manifest.json")) << manifest.dump(2) << "\n";
    std::cout << "wrote " << ds.items.size() << " images under " << ctx.path("dataset") << "\n";
    return 0;
}

int cmd_ingest(Ctx& ctx, const std::string& source) {
    auto ds = ingest_dataset(source, ctx.cfg.dataset_size);
    std::cout << "ingested " << ds.items.size() << " images in " << ds.num_classes << " classes\n";
    json manifest{{"config_hash", ctx.hash_hex()},
                  {"items", ds.items.size()},
                  {"classes", ds.num_classes},
                  {"source", source}};
    fs::create_directories(ctx.path("dataset"));
    std::ofstream(ctx.path("dataset/manifest.json")) << manifest.dump(2) << "\n";
    return 0;
}

int cmd_train_classifier(Ctx& ctx) {
    auto ds = load_dataset(ctx);
    std::vector<IspHandle> isps;
    for (auto& [id, isp] : make_pipelines(ctx)) isps.push_back(isp);
    TrainReport report;
    auto model = train_classifier(ds, isps, ctx.cfg.classifier_epochs, ctx.cfg.classifier_lr,
                                  ctx.cfg.seed, 0.70, &report, ctx.verbose,
                                  ctx.cfg.classifier_adv_eps);
    save_classifier(ctx.path("classifier.ckpt"), model, "cfg=" + ctx.hash_hex());
    std::cout << "classifier saved; test accuracy per pipeline: " << report.to_string() << "\n";
    return 0;
}

int cmd_train_proxy(Ctx& ctx, const std::string& isp_id) {
    auto isp = find_pipeline(ctx, isp_id);
    auto ds = load_dataset(ctx);
    auto train = split_raws(ds, Split::Train);
    auto val = split_raws(ds, Split::Val);
    auto model = ProxyModel::init(ctx.cfg.seed);
    train_proxy(model, isp, train, ctx.cfg.proxy_epochs, ctx.cfg.proxy_lr,
                splitmix64(ctx.cfg.seed ^ fnv1a(isp_id)), ctx.verbose);
    double db = proxy_psnr(model, isp, val);
    save_proxy(ctx.path(proxy_name(isp_id, false)), model, "cfg=" + ctx.hash_hex());
    std::cout << "proxy for " << isp_id << " saved, held-out PSNR " << db << " dB\n";
    return 0;
}

int cmd_local_proxy(Ctx& ctx, const std::string& isp_id) {
    auto isp = find_pipeline(ctx, isp_id);
    require_artifact(ctx.path("classifier.ckpt"), "train-classifier");
    check_hash(ctx, ctx.path("classifier.ckpt"));
    std::string base_path = ctx.path(proxy_name(isp_id, false));
    require_artifact(base_path, "train-proxy --isp " + isp_id);
    check_hash(ctx, base_path);

    auto classifier = load_classifier(ctx.path("classifier.ckpt"));
    auto base = load_proxy(base_path);
    auto ds = load_dataset(ctx);
    auto seeds = split_raws(ds, Split::Test, ctx.cfg.local_seeds);

    LocalProxyConfig lp;
    lp.epsilon = ctx.cfg.attack_epsilon;
    lp.alpha = ctx.cfg.attack_alpha;
    lp.steps = ctx.cfg.attack_steps;
    lp.augmentations = ctx.cfg.local_augmentations;
    lp.finetune_epochs = ctx.cfg.local_finetune_epochs;
    lp.base_lr = ctx.cfg.proxy_lr;
    auto local = local_proxy_training(base, isp, classifier, seeds, lp,
                                      splitmix64(ctx.cfg.seed ^ fnv1a("local" + isp_id)),
                                      ctx.verbose);
    save_proxy(ctx.path(proxy_name(isp_id, true)), local, "cfg=" + ctx.hash_hex());
    std::cout << "local proxy for " << isp_id << " saved\n";
    return 0;
}

int cmd_attack(Ctx& ctx, const std::string& mode, const std::string& target_isp) {
    require_artifact(ctx.path("classifier.ckpt"), "train-classifier");
    check_hash(ctx, ctx.path("classifier.ckpt"));
    auto classifier = load_classifier(ctx.path("classifier.ckpt"));
    auto isp = find_pipeline(ctx, target_isp);
    // black boxes are attacked via their learned proxy, differentiable ISPs
    // via their true graph
    PipelineFn fn = is_blackbox(target_isp) ? pipeline_fn(load_attack_proxy(ctx, target_isp))
                                            : pipeline_fn(isp);

    auto ds = load_dataset(ctx);
    auto images = split_raws(ds, Split::Test, ctx.cfg.eval_images);
    std::string out_dir = ctx.path("attacks/" + target_isp);
    fs::create_directories(out_dir);

    AttackConfig cfg;
    cfg.epsilon = ctx.cfg.attack_epsilon;
    cfg.alpha = ctx.cfg.attack_alpha;
    cfg.steps = ctx.cfg.attack_steps;

    std::ofstream records(out_dir + "/records.jsonl");
    int flips = 0;
    for (size_t n = 0; n < images.size(); ++n) {
        const RawImage& x = images[n];
        Rng rng = Rng::keyed(ctx.cfg.seed, fnv1a(target_isp) ^ (0x9e37 + n));
        cfg.seed = rng.next();
        int clean = decide(classifier, isp.evaluate(x));
        RawAttackResult res;
        if (mode == "targeted") {
            int t = rng.randint(classifier.num_classes - 1);
            if (t >= clean) ++t;
            cfg.target = t;
            res = targeted_attack(classifier, fn, {}, x, cfg);
        } else {
            cfg.target = -1;
            res = untargeted_attack(classifier, fn, x, cfg);
        }
        float linf = 0;
        for (float d : res.delta) linf = std::max(linf, std::abs(d));
        if (linf > cfg.epsilon * x.white_level + 1e-2f)
            throw Error("attack produced an out-of-ball delta; this is a bug");
        int adv = decide(classifier, isp.evaluate(res.adversarial));
        flips += (mode == "targeted") ? (adv == cfg.target) : (adv != clean);

        char base[32];
        std::snprintf(base, sizeof base, "img_%04zu", n);
        write_raw(out_dir + "/" + base + ".raw", res.adversarial);
        write_png(out_dir + "/" + base + ".png", isp.evaluate(res.adversarial));
        records << json{{"index", n},
                        {"mode", mode},
                        {"target", cfg.target},
                        {"clean_pred", clean},
                        {"adv_pred", adv},
                        {"delta_linf", linf},
                        {"config_hash", ctx.hash_hex()}}
                       .dump()
                << "\n";
    }
    std::cout << mode << " attack on " << target_isp << ": " << flips << "/" << images.size()
              << " successful\n";
    return 0;
}

int cmd_evaluate(Ctx& ctx) {
    require_artifact(ctx.path("classifier.ckpt"), "train-classifier");
    check_hash(ctx, ctx.path("classifier.ckpt"));
    auto classifier = load_classifier(ctx.path("classifier.ckpt"));
    auto ds = load_dataset(ctx);

    EvalReport rep;
    bool targeted = ctx.cfg.attack_target_policy != "untargeted";
    AttackConfig cfg;
    cfg.epsilon = ctx.cfg.attack_epsilon;
    cfg.alpha = ctx.cfg.attack_alpha;
    cfg.steps = ctx.cfg.attack_steps;
    cfg.lambdas = {ctx.cfg.attack_lambda};

    if (ctx.cfg.attack_domain == "display") {
        auto images_items = ds.split_items(Split::Test);
        std::vector<RgbImage> displays;
        for (const auto* it : images_items) {
            if (int(displays.size()) >= ctx.cfg.eval_images) break;
            displays.push_back(it->image);
        }
        auto isp = find_pipeline(ctx, "isp_a");
        PipelineFn fn = pipeline_fn(load_attack_proxy(ctx, "isp_a"));
        CaptureChain cf{"chain_f", load_psf_preset(ctx.presets + "/lens_f.preset"), isp};
        CaptureChain cc{"chain_c", load_psf_preset(ctx.presets + "/lens_c.preset"), isp};
        std::vector<EvalChain> chains{{"chain_f", cf, fn}, {"chain_c", cc, fn}};
        rep = run_optics_matrix(classifier, chains, displays, cfg, ctx.cfg.seed,
                                ctx.cfg.confidence_threshold);
    } else {
        auto images = split_raws(ds, Split::Test, ctx.cfg.eval_images);
        std::vector<EvalPipeline> pipes;
        for (auto& [id, isp] : make_pipelines(ctx)) {
            PipelineFn fn = is_blackbox(id) ? pipeline_fn(load_attack_proxy(ctx, id))
                                            : pipeline_fn(isp);
            pipes.push_back({id, isp, fn});
        }
        rep = run_isp_matrix(classifier, pipes, images, cfg, targeted, ctx.cfg.seed,
                             ctx.cfg.confidence_threshold);
    }
    rep.metadata["config_hash"] = ctx.hash_hex();
    rep.metadata["jobs"] = std::to_string(ctx.jobs);
    std::ofstream(ctx.path("report.csv")) << rep.to_csv();
    std::ofstream(ctx.path("report.json")) << rep.to_json().dump(2) << "\n";
    std::cout << "wrote " << ctx.path("report.csv") << " and report.json\n";
    return 0;
}

int cmd_report(Ctx& ctx) {
    require_artifact(ctx.path("report.json"), "evaluate");
    json j;
    std::ifstream(ctx.path("report.json")) >> j;
    auto attacked = j["attacked"].get<std::vector<std::string>>();
    auto deployed = j["deployed"].get<std::vector<std::string>>();

    size_t w = 10;
    for (const auto& s : deployed) w = std::max(w, s.size() + 2);
    auto pad = [&](const std::string& s) {
        return s + std::string(s.size() < w ? w - s.size() : 1, ' ');
    };
    std::cout << pad("attack\\eval");
    for (const auto& d : deployed) std::cout << pad(d);
    std::cout << "\n";
    for (size_t i = 0; i < attacked.size(); ++i) {
        std::cout << pad(attacked[i]);
        for (size_t jj = 0; jj < deployed.size(); ++jj) {
            const auto& c = j["cells"][i][jj];
            char buf[32];
            if (i == jj)
                std::snprintf(buf, sizeof buf, "%5.1f%%", c["success"].get<double>() * 100);
            else
                std::snprintf(buf, sizeof buf, "%4.1f|%4.1f",
                              c["transfer"].get<double>() * 100, c["conf_shift"].get<double>() * 100);
            std::cout << pad(buf);
        }
        std::cout << "\n";
    }
    for (auto& [k, v] : j["metadata"].items())
        std::cout << "# " << k << " = " << v.get<std::string>() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"camera-pipeline adversarial attack laboratory"};
    app.require_subcommand(1);

    Ctx ctx;
    std::string config_path, isp_id = "isp_a", mode = "targeted", source;
    app.add_option("--config", config_path, "experiment config file");
    app.add_option("--run-dir", ctx.run_dir, "artifact directory (default: run)");
    app.add_option("--presets", ctx.presets, "ISP/lens preset directory");
    app.add_option("--jobs", ctx.jobs, "parallel jobs (default 1)");
    app.add_flag("--allow-mixed", ctx.allow_mixed, "accept artifacts from other config hashes");
    app.add_flag("-v,--verbose", ctx.verbose, "log training progress");

    auto* gen = app.add_subcommand("gen-data", "generate the procedural dataset");
    auto* ing = app.add_subcommand("ingest", "ingest a folder of class-subdivided PNGs");
    ing->add_option("--source", source, "folder with class_name/*.png")->required();
    auto* tc = app.add_subcommand("train-classifier", "train the shared classifier");
    auto* tp = app.add_subcommand("train-proxy", "train a base proxy for one pipeline");
    tp->add_option("--isp", isp_id, "pipeline id")->required();
    auto* lp = app.add_subcommand("local-proxy", "fine-tune a local proxy for one pipeline");
    lp->add_option("--isp", isp_id, "pipeline id")->required();
    auto* at = app.add_subcommand("attack", "attack test images through one pipeline");
    at->add_option("--mode", mode, "targeted|untargeted");
    at->add_option("--target-isp", isp_id, "pipeline id")->required();
    auto* ev = app.add_subcommand("evaluate", "run the full attack/transfer matrix");
    auto* rp = app.add_subcommand("report", "render report.json as a text table");

    CLI11_PARSE(app, argc, argv);

    try {
        resolve_config(ctx, config_path);
        if (gen->parsed()) return cmd_gen_data(ctx);
        if (ing->parsed()) return cmd_ingest(ctx, source);
        if (tc->parsed()) return cmd_train_classifier(ctx);
        if (tp->parsed()) return cmd_train_proxy(ctx, isp_id);
        if (lp->parsed()) return cmd_local_proxy(ctx, isp_id);
        if (at->parsed()) return cmd_attack(ctx, mode, isp_id);
        if (ev->parsed()) return cmd_evaluate(ctx);
        if (rp->parsed()) return cmd_report(ctx);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }
    return 2;
}
