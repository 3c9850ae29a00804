// layerflow: layer-aware video diffusion sandbox.
// Subcommands: gen-data, train, sample, eval. All outputs are deterministic
// in (config, seed), so reruns are byte-identical.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lf/config.hpp"
#include "lf/diffusion.hpp"
#include "lf/log.hpp"
#include "lf/lora.hpp"
#include "lf/metrics.hpp"
#include "lf/synthdata.hpp"
#include "lf/textcond.hpp"
#include "lf/trainer.hpp"

namespace fs = std::filesystem;
using namespace lf;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<int> threads;
};

RunConfig resolve_config(const GlobalOpts& g) {
    RunConfig c = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
    if (g.seed) c.seed = *g.seed;       // flags win over the file
    if (g.threads) c.threads = *g.threads;
    c.validate();
    return c;
}

void echo_config(const RunConfig& c, const std::string& out_dir) {
    fs::create_directories(out_dir);
    c.save((fs::path(out_dir) / "config.resolved.json").string());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << content;
    if (!os) throw std::runtime_error("write failed: " + path);
}

// ---- gen-data -------------------------------------------------------------

int cmd_gen_data(const GlobalOpts& g, const std::string& out_dir) {
    RunConfig cfg = resolve_config(g);
    echo_config(cfg, out_dir);

    Vocabulary vocab(caption_vocabulary());
    vocab.save((fs::path(out_dir) / "vocab.txt").string());

    auto rows = generate_dataset(cfg.data, cfg.seed, out_dir);
    write_manifest((fs::path(out_dir) / "manifest.csv").string(), rows);

    // validation pass: every declared output must read back cleanly
    Vocabulary::load((fs::path(out_dir) / "vocab.txt").string());
    auto back = read_manifest((fs::path(out_dir) / "manifest.csv").string());
    if (back.size() != rows.size())
        throw std::runtime_error("gen-data: manifest row count mismatch after write");
    for (const auto& row : back) {
        LayerQuadruple q = read_quadruple((fs::path(out_dir) / row.file).string());
        for (const auto& prompt : q.prompts)
            for (const auto& word : tokenize(prompt))
                if (vocab.id_of(word) == kUnknownId)
                    throw std::runtime_error("gen-data: prompt word outside the vocabulary: " +
                                             word);
    }
    log_info("gen-data: wrote " + std::to_string(rows.size()) + " samples to " + out_dir);
    return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const GlobalOpts& g, int stage, const std::string& data_dir,
              const std::string& in_ckpt, const std::string& out_dir) {
    RunConfig cfg = resolve_config(g);
    echo_config(cfg, out_dir);

    if (stage >= 2 && in_ckpt.empty())
        throw std::runtime_error("train: stage " + std::to_string(stage) +
                                 " requires --in-ckpt with the stage-" +
                                 std::to_string(stage - 1) + " checkpoint");

    auto manifest = read_manifest((fs::path(data_dir) / "manifest.csv").string());
    StageConfig stage_cfg = cfg.stage_config(stage);

    Model model;
    Vocabulary vocab;
    if (stage == 1) {
        vocab = Vocabulary::load((fs::path(data_dir) / "vocab.txt").string());
        Rng init_rng(cfg.seed);
        model = build_model(cfg.backbone(vocab.size()), init_rng);
    } else {
        Checkpoint ck = load_checkpoint(in_ckpt);
        if (ck.stage < stage - 1)
            throw std::runtime_error("train: stage " + std::to_string(stage) +
                                     " requires a stage-" + std::to_string(stage - 1) +
                                     " checkpoint, got stage " + std::to_string(ck.stage));
        model = std::move(ck.model);
        vocab = std::move(ck.vocab);
        Rng adapter_rng(cfg.seed ^ (0x1000ull * static_cast<uint64_t>(stage)));
        if (stage == 2 && !model.has_motion) attach_motion_adapters(model, adapter_rng);
        if (stage == 3) {
            if (!model.has_motion)
                throw std::runtime_error(
                    "train: stage 3 requires motion adapters from stage 2; checkpoint has none");
            if (!model.has_content) attach_content_adapters(model, adapter_rng);
        }
    }

    TrainSet data = load_train_set(data_dir, manifest, stage_cfg.tiers, model.cfg.patch);
    NoiseSchedule schedule = cfg.schedule();
    if (schedule.T != model.cfg.max_timestep)
        throw std::runtime_error("train: schedule steps differ from the checkpoint's");

    TrainerState state;
    state.rng = Rng(cfg.seed ^ (0xabcd0000ull + static_cast<uint64_t>(stage)));
    std::vector<TrainLogRow> log;
    run_stage(model, vocab, stage_cfg, data, schedule, state, stage_cfg.steps, cfg.threads, log);

    const std::string ckpt_path =
        (fs::path(out_dir) / ("stage" + std::to_string(stage) + ".lfck")).string();
    std::vector<std::string> opt_keys;
    for (auto& [k, t] : select_trainable(model, stage)) opt_keys.push_back(k);
    save_checkpoint(ckpt_path, model, vocab, stage, state, true, opt_keys);
    write_text((fs::path(out_dir) / ("stage" + std::to_string(stage) + "_log.csv")).string(),
               log_to_csv(log));

    load_checkpoint(ckpt_path);  // validation pass
    log_info("train: stage " + std::to_string(stage) + " finished at step " +
             std::to_string(state.step) + ", checkpoint " + ckpt_path);
    return 0;
}

// ---- sample -----------------------------------------------------------------

void dump_frames(const LayerQuadruple& q, const std::string& dir) {
    fs::create_directories(dir);
    auto clamp255 = [](float v) {
        return static_cast<unsigned char>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    };
    auto write_ppm = [&](const Video& v, const std::string& stem) {
        for (int f = 0; f < v.frames; ++f) {
            std::ofstream os(dir + "/" + stem + "_f" + std::to_string(f) + ".ppm",
                             std::ios::binary);
            os << "P6\n" << v.width << " " << v.height << "\n255\n";
            for (int y = 0; y < v.height; ++y)
                for (int x = 0; x < v.width; ++x)
                    for (int c = 0; c < 3; ++c) os.put(static_cast<char>(clamp255(v.at(f, y, x, c))));
        }
    };
    auto write_pgm = [&](const Video& v, const std::string& stem) {
        for (int f = 0; f < v.frames; ++f) {
            std::ofstream os(dir + "/" + stem + "_f" + std::to_string(f) + ".pgm",
                             std::ios::binary);
            os << "P5\n" << v.width << " " << v.height << "\n255\n";
            for (int y = 0; y < v.height; ++y)
                for (int x = 0; x < v.width; ++x) os.put(static_cast<char>(clamp255(v.at(f, y, x, 0))));
        }
    };
    write_ppm(q.fg, "fg");
    write_pgm(q.alpha, "alpha");
    write_ppm(q.bg, "bg");
    write_ppm(q.blended, "blended");
}

int cmd_sample(const GlobalOpts& g, const std::string& ckpt_path, const std::string& variant,
               std::vector<std::string> prompts, const std::string& cond_path,
               const std::string& out_dir, bool dump) {
    RunConfig cfg = resolve_config(g);
    echo_config(cfg, out_dir);

    Checkpoint ck = load_checkpoint(ckpt_path);
    Model& model = ck.model;
    NoiseSchedule schedule = cfg.schedule();
    if (schedule.T != model.cfg.max_timestep)
        throw std::runtime_error("sample: schedule steps differ from the checkpoint's");

    ConditionMask mask = ConditionMask::from_variant(variant);

    std::optional<PackedSequence> cond;
    std::array<std::string, 3> prompt_arr;
    if (!cond_path.empty()) {
        LayerQuadruple q = read_quadruple(cond_path);
        cond = pack(q, model.cfg.patch, IdentityEmbedding());
        prompt_arr = q.prompts;
    } else if (mask.any_fixed()) {
        throw std::runtime_error("sample: variant " + variant +
                                 " needs --cond with the conditioning quadruple");
    }
    if (!prompts.empty()) {
        if (prompts.size() != 3)
            throw std::runtime_error("sample: exactly 3 prompts required (fg, bg, blended), got " +
                                     std::to_string(prompts.size()));
        std::copy(prompts.begin(), prompts.end(), prompt_arr.begin());
    } else if (cond_path.empty()) {
        throw std::runtime_error("sample: prompts required when no conditioning file is given");
    }

    SamplerSettings settings;
    settings.steps = cfg.sampling_steps;
    settings.cfg_scale = cfg.cfg_scale;
    settings.seed = cfg.seed;
    settings.gate_alpha = 0.0f;  // Motion LoRA is dropped at inference

    LayerQuadruple out = sample(model, ck.vocab, prompt_arr, mask,
                                cond ? &*cond : nullptr, schedule, settings);
    out.prompts = prompt_arr;

    const std::string sample_path = (fs::path(out_dir) / "sample.lfq").string();
    write_quadruple(sample_path, out);

    std::string sidecar;
    sidecar += "seed=" + std::to_string(settings.seed) + "\n";
    sidecar += "steps=" + std::to_string(settings.steps) + "\n";
    sidecar += "scale=" + std::to_string(settings.cfg_scale) + "\n";
    sidecar += "mask=" + mask.to_string() + "\n";
    sidecar += "variant=" + variant + "\n";
    sidecar += "prompt_fg=" + prefix_index(prompt_arr[0], 1) + "\n";
    sidecar += "prompt_bg=" + prefix_index(prompt_arr[1], 2) + "\n";
    sidecar += "prompt_bl=" + prefix_index(prompt_arr[2], 3) + "\n";
    write_text((fs::path(out_dir) / "sample.txt").string(), sidecar);

    if (dump) dump_frames(out, (fs::path(out_dir) / "frames").string());

    read_quadruple(sample_path);  // validation pass
    log_info("sample: wrote " + sample_path);
    return 0;
}

// ---- eval --------------------------------------------------------------------

int cmd_eval(const GlobalOpts& g, const std::string& pred_dir, const std::string& truth_dir,
             const std::string& out_dir) {
    RunConfig cfg = resolve_config(g);
    echo_config(cfg, out_dir);

    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(pred_dir))
        if (entry.path().extension() == ".lfq") files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("eval: no .lfq samples in " + pred_dir);

    const bool with_truth = !truth_dir.empty();
    const char* layer_names[kNumClips] = {"FG", "ALPHA", "BG", "BL"};

    std::string per_sample = "sample,layer,metric,value\n";
    std::map<std::string, double> fc_sum, dd_sum, rec_sum;
    std::map<std::string, int> fc_n, dd_n, rec_n;

    for (const auto& file : files) {
        LayerQuadruple pred = read_quadruple((fs::path(pred_dir) / file).string());
        const Video* layers[kNumClips] = {&pred.fg, &pred.alpha, &pred.bg, &pred.blended};

        std::array<double, kNumClips> rec{};
        if (with_truth) {
            const std::string truth_path = (fs::path(truth_dir) / file).string();
            if (!fs::exists(truth_path))
                throw std::runtime_error("eval: missing ground truth for " + file);
            rec = reconstruction_error(pred, read_quadruple(truth_path));
        }
        for (int c = 0; c < kNumClips; ++c) {
            const bool enough_frames = layers[c]->frames >= 2;
            const double fc = enough_frames ? frame_consistency(*layers[c]) : 0.0;
            const double dd = enough_frames ? dynamic_degree(*layers[c]) : 0.0;
            per_sample += file;
            per_sample += std::string(",") + layer_names[c] + ",frame_consistency," +
                          (enough_frames ? std::to_string(fc) : "na") + "\n";
            per_sample += file;
            // dynamic degree is not measured on background videos
            const bool dd_applicable = enough_frames && c != kBg;
            per_sample += std::string(",") + layer_names[c] + ",dynamic_degree," +
                          (dd_applicable ? std::to_string(dd) : "na") + "\n";
            if (with_truth) {
                per_sample += file;
                per_sample += std::string(",") + layer_names[c] + ",reconstruction_mse," +
                              std::to_string(rec[static_cast<size_t>(c)]) + "\n";
            }
            if (enough_frames) {
                fc_sum[layer_names[c]] += fc;
                fc_n[layer_names[c]]++;
                if (dd_applicable) {
                    dd_sum[layer_names[c]] += dd;
                    dd_n[layer_names[c]]++;
                }
            }
            if (with_truth) {
                rec_sum[layer_names[c]] += rec[static_cast<size_t>(c)];
                rec_n[layer_names[c]]++;
            }
        }
    }

    MetricReport report;
    report.sample_count = static_cast<int>(files.size());
    for (const char* layer : {"FG", "BG", "BL"}) {
        report.frame_consistency[layer] = {fc_n[layer] ? fc_sum[layer] / fc_n[layer] : 0.0,
                                           fc_n[layer] > 0, fc_n[layer]};
        if (std::string(layer) == "BG")
            report.dynamic_degree[layer] = {0.0, false, 0};
        else
            report.dynamic_degree[layer] = {dd_n[layer] ? dd_sum[layer] / dd_n[layer] : 0.0,
                                            dd_n[layer] > 0, dd_n[layer]};
    }
    if (with_truth)
        for (const char* layer : {"FG", "ALPHA", "BG", "BL"})
            report.reconstruction[layer] = {rec_n[layer] ? rec_sum[layer] / rec_n[layer] : 0.0,
                                            rec_n[layer] > 0, rec_n[layer]};

    write_text((fs::path(out_dir) / "per_sample.csv").string(), per_sample);
    write_text((fs::path(out_dir) / "report.csv").string(), report.to_csv());
    write_text((fs::path(out_dir) / "report.json").string(), report.to_json());

    for (const char* f : {"per_sample.csv", "report.csv", "report.json"})
        if (!fs::exists(fs::path(out_dir) / f) || fs::file_size(fs::path(out_dir) / f) == 0)
            throw std::runtime_error(std::string("eval: failed to write ") + f);
    log_info("eval: " + std::to_string(files.size()) + " samples -> " + out_dir);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layer-aware video diffusion sandbox"};
    app.require_subcommand(1);

    GlobalOpts g;
    uint64_t seed_flag = 0;
    int threads_flag = 0;
    app.add_option("--config", g.config_path, "run configuration file (JSON)");
    auto* seed_opt = app.add_option("--seed", seed_flag, "override the config seed");
    auto* threads_opt = app.add_option("--threads", threads_flag, "worker thread bound");

    std::string out_dir, data_dir, in_ckpt, ckpt, variant = "generate", cond_path, pred_dir,
                truth_dir;
    int stage = 1;
    std::vector<std::string> prompts;
    bool dump = false;

    CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic dataset tiers");
    gen->add_option("--out", out_dir, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--stage", stage, "training stage")->check(CLI::Range(1, 3))->required();
    train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    train->add_option("--in-ckpt", in_ckpt, "prerequisite checkpoint (stages 2 and 3)");
    train->add_option("--out", out_dir, "output directory")->required();

    CLI::App* smp = app.add_subcommand("sample", "draw a layered video from a checkpoint");
    smp->add_option("--ckpt", ckpt, "model checkpoint")->required();
    smp->add_option("--variant", variant, "generate | decompose | fg_cond | bg_cond");
    smp->add_option("--prompt", prompts, "layer prompt (give three: fg, bg, blended)");
    smp->add_option("--cond", cond_path, "conditioning quadruple file");
    smp->add_option("--out", out_dir, "output directory")->required();
    smp->add_flag("--dump-frames", dump, "also write PPM/PGM frames");

    CLI::App* ev = app.add_subcommand("eval", "score sample directories");
    ev->add_option("--pred", pred_dir, "directory of predicted quadruples")->required();
    ev->add_option("--truth", truth_dir, "directory of ground-truth quadruples");
    ev->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) g.seed = seed_flag;
    if (*threads_opt) g.threads = threads_flag;

    try {
        if (gen->parsed()) return cmd_gen_data(g, out_dir);
        if (train->parsed()) return cmd_train(g, stage, data_dir, in_ckpt, out_dir);
        if (smp->parsed()) return cmd_sample(g, ckpt, variant, prompts, cond_path, out_dir, dump);
        if (ev->parsed()) return cmd_eval(g, pred_dir, truth_dir, out_dir);
    } catch (const std::exception& e) {
        log_error(e.what());
        return 1;
    }
    return 1;
}
