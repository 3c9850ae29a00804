#include "lf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "lf/lora.hpp"

namespace lf {

StageConfig StageConfig::defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case 1:
            c.lr = 1e-4f;
            c.steps = 2000;
            c.tiers = {"coarse"};
            c.gate_policy = GatePolicy::kAlwaysOff;
            break;
        case 2:
            c.lr = 1e-3f;
            c.steps = 500;
            c.tiers = {"frozen"};
            c.gate_policy = GatePolicy::kAlwaysOn;
            break;
        case 3:
            c.lr = 5e-3f;
            c.steps = 1000;
            c.tiers = {"mix_static", "mix_dynamic"};
            c.gate_policy = GatePolicy::kByTier;
            break;
        default:
            throw std::invalid_argument("StageConfig: stage must be 1, 2 or 3");
    }
    return c;
}

void StageConfig::validate() const {
    if (stage < 1 || stage > 3) throw std::invalid_argument("StageConfig: stage must be 1..3");
    if (lr <= 0.0f) throw std::invalid_argument("StageConfig: lr must be positive");
    if (steps < 0) throw std::invalid_argument("StageConfig: steps must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("StageConfig: batch size must be >= 1");
    if (tiers.empty()) throw std::invalid_argument("StageConfig: no dataset tiers selected");
    const double total = mask_generation + mask_fg_cond + mask_bg_cond + mask_decompose;
    if (std::fabs(total - 1.0) > 1e-6)
        throw std::invalid_argument("StageConfig: mask probabilities must sum to 1");
    if (prompt_drop < 0.0 || prompt_drop > 1.0)
        throw std::invalid_argument("StageConfig: prompt_drop must be in [0, 1]");
}

// ---- Adam ------------------------------------------------------------------

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               float lr) {
    if (lr <= 0.0f) throw std::invalid_argument("adam_step: lr must be positive");
    // validate before touching anything so a NaN aborts the whole step
    for (const auto& [key, p] : params) {
        if (!p.has_grad()) continue;
        for (float g : p.grad())
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient for " + key);
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
    for (auto& [key, p] : params) {
        auto mit = state.m.find(key);
        if (mit == state.m.end()) {
            mit = state.m.emplace(key, Tensor::zeros(p.shape())).first;
            state.v.emplace(key, Tensor::zeros(p.shape()));
        }
        Tensor& m = mit->second;
        Tensor& v = state.v.at(key);
        if (m.shape() != p.shape())
            throw std::runtime_error("adam_step: moment shape mismatch for " + key);
        Tensor pcopy = p;  // handle; shared storage
        const std::vector<float>* grad = pcopy.has_grad() ? &pcopy.grad() : nullptr;
        float* pd = pcopy.data();
        float* md = m.data();
        float* vd = v.data();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const float g = grad ? (*grad)[static_cast<size_t>(i)] : 0.0f;
            md[i] = state.beta1 * md[i] + (1.0f - state.beta1) * g;
            vd[i] = state.beta2 * vd[i] + (1.0f - state.beta2) * g * g;
            const float mhat = md[i] / static_cast<float>(bc1);
            const float vhat = vd[i] / static_cast<float>(bc2);
            pd[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---- dataset loading -----------------------------------------------------------

TrainSet load_train_set(const std::string& data_dir, const std::vector<ManifestRow>& manifest,
                        const std::vector<std::string>& tiers, int patch) {
    namespace fs = std::filesystem;
    TrainSet out;
    IdentityEmbedding identity;
    for (const auto& row : manifest) {
        if (std::find(tiers.begin(), tiers.end(), row.tier) == tiers.end()) continue;
        LayerQuadruple q = read_quadruple((fs::path(data_dir) / row.file).string());
        TrainSample s;
        s.x0 = pack(q, patch, identity);
        s.prompts = q.prompts;
        s.tier = row.tier;
        out.push_back(std::move(s));
    }
    if (out.empty())
        throw std::runtime_error("load_train_set: no samples for the requested tiers in " +
                                 data_dir);
    return out;
}

// ---- logging ---------------------------------------------------------------------

std::string log_to_csv(const std::vector<TrainLogRow>& log) {
    std::ostringstream os;
    os << "step,stage,loss,gate,mask,lr\n";
    for (const auto& r : log)
        os << r.step << ',' << r.stage << ',' << r.loss << ',' << r.gate << ',' << r.mask << ','
           << r.lr << '\n';
    return os.str();
}

// ---- run_stage ---------------------------------------------------------------------

namespace {

const char* mask_name(const ConditionMask& m) {
    const std::string s = m.to_string();
    if (s == "FFFF") return "generation";
    if (s == "TTFF") return "fg_cond";
    if (s == "FFTF") return "bg_cond";
    if (s == "FFFT") return "decompose";
    return "custom";
}

}  // namespace

void run_stage(Model& model, const Vocabulary& vocab, const StageConfig& cfg,
               const TrainSet& data, const NoiseSchedule& schedule, TrainerState& state,
               int64_t target_steps, int threads, std::vector<TrainLogRow>& log) {
    cfg.validate();
    if (threads < 1) threads = 1;

    // tier pools; a batch draws from exactly one pool so it has one gate value
    std::vector<std::vector<int>> pools;
    std::vector<float> pool_gate;
    if (cfg.gate_policy == GatePolicy::kByTier) {
        std::vector<int> stat, dyn;
        for (size_t i = 0; i < data.size(); ++i) {
            if (data[i].tier == "mix_dynamic")
                dyn.push_back(static_cast<int>(i));
            else
                stat.push_back(static_cast<int>(i));
        }
        if (!stat.empty()) {
            pools.push_back(std::move(stat));
            pool_gate.push_back(1.0f);
        }
        if (!dyn.empty()) {
            pools.push_back(std::move(dyn));
            pool_gate.push_back(0.0f);
        }
    } else {
        std::vector<int> all(data.size());
        for (size_t i = 0; i < data.size(); ++i) all[i] = static_cast<int>(i);
        pools.push_back(std::move(all));
        pool_gate.push_back(cfg.gate_policy == GatePolicy::kAlwaysOn ? 1.0f : 0.0f);
    }
    size_t total_pool = 0;
    for (const auto& p : pools) total_pool += p.size();

    auto trainable = select_trainable(model, cfg.stage);

    const int64_t sample_numel = data.front().x0.tokens.numel();
    // tapes persist across steps so their gradient buffers get recycled
    std::vector<Tape> tapes(static_cast<size_t>(cfg.batch_size));
    for (; state.step < target_steps; ++state.step) {
        // pool choice first, then mask, then the per-sample draws; the order
        // is part of the replay contract
        size_t pool_idx = 0;
        if (pools.size() > 1) {
            const double u = state.rng.uniform();
            pool_idx = u < static_cast<double>(pools[0].size()) / total_pool ? 0 : 1;
        }
        const std::vector<int>& pool = pools[pool_idx];
        const float gate = pool_gate[pool_idx];

        ConditionMask mask = ConditionMask::generation();
        {
            const double u = state.rng.uniform();
            if (u < cfg.mask_generation)
                mask = ConditionMask::generation();
            else if (u < cfg.mask_generation + cfg.mask_fg_cond)
                mask = ConditionMask::fg_conditioned();
            else if (u < cfg.mask_generation + cfg.mask_fg_cond + cfg.mask_bg_cond)
                mask = ConditionMask::bg_conditioned();
            else
                mask = ConditionMask::decomposition();
        }

        std::vector<BatchItem> batch(static_cast<size_t>(cfg.batch_size));
        for (auto& item : batch) {
            const int idx = pool[state.rng.uniform_int(pool.size())];
            const TrainSample& s = data[static_cast<size_t>(idx)];
            item.x0 = s.x0;
            item.prompts = s.prompts;
            item.mask = mask;
            item.t = static_cast<int>(state.rng.uniform_int(static_cast<uint64_t>(schedule.T)));
            item.drop_prompt = state.rng.bernoulli(cfg.prompt_drop);
            item.eps.resize(static_cast<size_t>(sample_numel));
            for (auto& e : item.eps) e = state.rng.normal();
        }

        set_gate(model, gate);
        const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);
        for (auto& tape : tapes) tape.clear();
        std::vector<float> losses(batch.size(), 0.0f);

        auto work = [&](size_t begin, size_t end) {
            for (size_t i = begin; i < end; ++i) {
                Tensor li = scale(sample_loss(model, vocab, batch[i], schedule, &tapes[i]).loss,
                                  inv_b, &tapes[i]);
                losses[i] = li.item();
                tapes[i].backward_local(li);
            }
        };
        const size_t workers = std::min<size_t>(static_cast<size_t>(threads), batch.size());
        if (workers <= 1) {
            work(0, batch.size());
        } else {
            std::vector<std::thread> ts;
            const size_t chunk = (batch.size() + workers - 1) / workers;
            for (size_t w = 0; w < workers; ++w) {
                const size_t b = w * chunk;
                const size_t e = std::min(batch.size(), b + chunk);
                if (b < e) ts.emplace_back(work, b, e);
            }
            for (auto& t : ts) t.join();
        }
        // gradients land in sample order regardless of the thread count
        for (auto& tape : tapes) tape.flush_grads();

        adam_step(trainable, state.adam, cfg.lr);
        model.zero_grads();

        float loss = 0.0f;
        for (float l : losses) loss += l;
        log.push_back(TrainLogRow{state.step + 1, cfg.stage, loss, gate, mask_name(mask), cfg.lr});
    }
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw std::runtime_error("checkpoint read: truncated file");
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is, uint32_t limit = (1u << 26)) {
    uint32_t len = read_u32(is);
    if (len > limit) throw std::runtime_error("checkpoint read: implausible string length");
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error("checkpoint read: truncated string");
    return s;
}

constexpr uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const BackboneConfig& c) {
    return nlohmann::json{{"d_model", c.d_model},   {"n_blocks", c.n_blocks},
                          {"n_heads", c.n_heads},   {"patch", c.patch},
                          {"t_txt", c.t_txt},       {"frames", c.frames},
                          {"height", c.height},     {"width", c.width},
                          {"vocab_size", c.vocab_size}, {"max_timestep", c.max_timestep},
                          {"lora_rank", c.lora_rank},   {"ln_eps", c.ln_eps}};
}

BackboneConfig config_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.patch = j.at("patch").get<int>();
    c.t_txt = j.at("t_txt").get<int>();
    c.frames = j.at("frames").get<int>();
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_timestep = j.at("max_timestep").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.ln_eps = j.at("ln_eps").get<float>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const Vocabulary& vocab, int stage,
                     const TrainerState& state, bool include_optimizer,
                     const std::vector<std::string>& optimizer_keys) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);

    nlohmann::json meta;
    meta["stage"] = stage;
    meta["step"] = state.step;
    meta["gate_alpha"] = model.gate_alpha;
    meta["has_motion"] = model.has_motion;
    meta["has_content"] = model.has_content;
    meta["has_optimizer"] = include_optimizer;
    meta["adam_step"] = state.adam.step;
    meta["rng"] = state.rng.state();
    meta["vocab"] = vocab.tokens();
    meta["model"] = config_to_json(model.cfg);

    os.write("LFCK", 4);
    write_u32(os, kCheckpointVersion);
    write_str(os, meta.dump());

    auto params = model.named_params();
    uint32_t n_records = static_cast<uint32_t>(params.size());
    if (include_optimizer) n_records += 2 * static_cast<uint32_t>(optimizer_keys.size());
    write_u32(os, n_records);
    for (auto& [key, t] : params) {
        write_str(os, key);
        write_tensor(os, t);
    }
    if (include_optimizer) {
        for (const auto& key : optimizer_keys) {
            auto mit = state.adam.m.find(key);
            auto vit = state.adam.v.find(key);
            if (mit == state.adam.m.end() || vit == state.adam.v.end())
                throw std::runtime_error("save_checkpoint: no optimizer state for " + key);
            write_str(os, "adam.m." + key);
            write_tensor(os, mit->second);
            write_str(os, "adam.v." + key);
            write_tensor(os, vit->second);
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "LFCK", 4) != 0)
        throw std::runtime_error("checkpoint version error: bad magic in " + path);
    const uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint version error: unsupported version " +
                                 std::to_string(version));
    nlohmann::json meta = nlohmann::json::parse(read_str(is));

    Checkpoint ck;
    ck.stage = meta.at("stage").get<int>();
    ck.state.step = meta.at("step").get<int64_t>();
    ck.state.adam.step = meta.at("adam_step").get<int64_t>();
    ck.state.rng.set_state(meta.at("rng").get<std::string>());
    ck.has_optimizer = meta.at("has_optimizer").get<bool>();
    ck.vocab = Vocabulary(meta.at("vocab").get<std::vector<std::string>>());

    Rng scratch(0);
    ck.model = build_model(config_from_json(meta.at("model")), scratch);
    if (meta.at("has_motion").get<bool>()) attach_motion_adapters(ck.model, scratch);
    if (meta.at("has_content").get<bool>()) attach_content_adapters(ck.model, scratch);
    set_gate(ck.model, meta.at("gate_alpha").get<float>());

    std::map<std::string, Tensor> expected;
    for (auto& [key, t] : ck.model.named_params()) expected.emplace(key, t);

    std::map<std::string, bool> seen;
    const uint32_t n_records = read_u32(is);
    for (uint32_t r = 0; r < n_records; ++r) {
        const std::string key = read_str(is, 4096);
        Tensor t = read_tensor(is);
        if (key.rfind("adam.m.", 0) == 0 || key.rfind("adam.v.", 0) == 0) {
            if (!ck.has_optimizer)
                throw std::runtime_error("checkpoint read: unexpected optimizer key " + key);
            const bool is_m = key[5] == 'm';
            const std::string param_key = key.substr(7);
            if (expected.find(param_key) == expected.end())
                throw std::runtime_error("checkpoint read: unknown key " + key);
            (is_m ? ck.state.adam.m : ck.state.adam.v).emplace(param_key, t);
            continue;
        }
        auto it = expected.find(key);
        if (it == expected.end()) throw std::runtime_error("checkpoint read: unknown key " + key);
        if (it->second.shape() != t.shape())
            throw std::runtime_error("checkpoint read: shape mismatch for key " + key);
        std::copy(t.vec().begin(), t.vec().end(), it->second.vec().begin());
        seen[key] = true;
    }
    for (const auto& [key, t] : expected)
        if (!seen.count(key))
            throw std::runtime_error("checkpoint read: missing key " + key);
    return ck;
}

}  // namespace lf
