#include "fewseg/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fewseg {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

long long parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        long long out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": " + v);
    }
}

double parse_real(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad real for " + key + ": " + v);
    }
}

std::vector<std::string> split_csv(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

template <typename E>
struct NamedEnum {
    const char* name;
    E value;
};

constexpr NamedEnum<Interaction> kInteractions[] = {
    {"kv_fusion", Interaction::kKvFusion}, {"token_cross", Interaction::kTokenCross}};
constexpr NamedEnum<Injection> kInjections[] = {{"concatenation", Injection::kConcatenation},
                                                {"multiplication", Injection::kMultiplication},
                                                {"attention_mask", Injection::kAttentionMask},
                                                {"addition", Injection::kAddition}};
constexpr NamedEnum<MulDomain> kMulDomains[] = {{"rgb", MulDomain::kRgb},
                                                {"latent", MulDomain::kLatent}};
constexpr NamedEnum<FusionStrategy> kFusions[] = {{"kv", FusionStrategy::kKv},
                                                  {"qkv", FusionStrategy::kQkv}};
constexpr NamedEnum<SupervisionForm> kForms[] = {
    {"white_on_black", SupervisionForm::kWhiteOnBlack},
    {"real_fg_black_bg", SupervisionForm::kRealFgBlackBg},
    {"black_fg_real_bg", SupervisionForm::kBlackFgRealBg},
    {"mask_over_image", SupervisionForm::kMaskOverImage}};
constexpr NamedEnum<Process> kProcesses[] = {{"one_step", Process::kOneStep},
                                             {"multi_step_noise", Process::kMultiStepNoise},
                                             {"multi_step_image", Process::kMultiStepImage}};
constexpr NamedEnum<VariancePreset> kPresets[] = {{"narrow", VariancePreset::kNarrow},
                                                  {"wide", VariancePreset::kWide},
                                                  {"custom", VariancePreset::kCustom}};
constexpr NamedEnum<LrSchedule> kLrSchedules[] = {{"linear_decay", LrSchedule::kLinearDecay},
                                                  {"constant", LrSchedule::kConstant}};
constexpr NamedEnum<ThresholdConfig::Mode> kThrModes[] = {
    {"relative", ThresholdConfig::Mode::kRelative},
    {"absolute", ThresholdConfig::Mode::kAbsolute}};

template <typename E, size_t N>
E parse_enum(const NamedEnum<E> (&table)[N], const std::string& v, const std::string& key) {
    for (const auto& e : table)
        if (v == e.name) return e.value;
    std::string options;
    for (const auto& e : table) options += std::string(options.empty() ? "" : "|") + e.name;
    throw std::invalid_argument("config: bad value for " + key + ": " + v + " (expected " +
                                options + ")");
}

template <typename E, size_t N>
std::string enum_name(const NamedEnum<E> (&table)[N], E v) {
    for (const auto& e : table)
        if (v == e.value) return e.name;
    return "?";
}

}  // namespace

void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "interaction") c.interaction = parse_enum(kInteractions, v, key);
    else if (key == "injection") c.injection = parse_enum(kInjections, v, key);
    else if (key == "multiplication_domain") c.mul_domain = parse_enum(kMulDomains, v, key);
    else if (key == "fusion_strategy") c.fusion = parse_enum(kFusions, v, key);
    else if (key == "supervision") c.supervision = parse_enum(kForms, v, key);
    else if (key == "levels") c.levels = static_cast<int>(parse_int(v, key));
    else if (key == "widths") {
        c.widths.clear();
        for (const std::string& s : split_csv(v)) c.widths.push_back(static_cast<int>(parse_int(s, key)));
    }
    else if (key == "blocks_per_level") c.blocks_per_level = static_cast<int>(parse_int(v, key));
    else if (key == "head_dim") c.head_dim = static_cast<int>(parse_int(v, key));
    else if (key == "ctx_dim") c.ctx_dim = static_cast<int>(parse_int(v, key));
    else if (key == "patch_size") c.patch_size = static_cast<int>(parse_int(v, key));
    else if (key == "time_embed_dim") c.time_embed_dim = static_cast<int>(parse_int(v, key));
    else if (key == "canvas") c.canvas = static_cast<int>(parse_int(v, key));
    else if (key == "codec_factor") c.codec_factor = static_cast<int>(parse_int(v, key));
    else if (key == "fill_query_with_image") c.fill_query_with_image = parse_bool(v, key);
    else if (key == "fusion_enabled") {
        c.fusion_enabled.clear();
        if (v != "all")
            for (const std::string& s : split_csv(v))
                c.fusion_enabled.push_back(parse_bool(s, key) ? 1 : 0);
    }
    else if (key == "process") c.process = parse_enum(kProcesses, v, key);
    else if (key == "steps") c.steps = static_cast<int>(parse_int(v, key));
    else if (key == "schedule_steps") c.schedule_steps = static_cast<int>(parse_int(v, key));
    else if (key == "variance_preset") c.variance_preset = parse_enum(kPresets, v, key);
    else if (key == "beta_start") c.beta_start = parse_real(v, key);
    else if (key == "beta_end") c.beta_end = parse_real(v, key);
    else if (key == "ensemble") c.ensemble = static_cast<int>(parse_int(v, key));
    else if (key == "n_shot_train_min") c.n_shot_train_min = static_cast<int>(parse_int(v, key));
    else if (key == "n_shot_train_max") c.n_shot_train_max = static_cast<int>(parse_int(v, key));
    else if (key == "n_shot_infer") c.n_shot_infer = static_cast<int>(parse_int(v, key));
    else if (key == "infer_kv_sampling") c.infer_kv_sampling = parse_bool(v, key);
    else if (key == "lr") c.lr = parse_real(v, key);
    else if (key == "weight_decay") c.weight_decay = parse_real(v, key);
    else if (key == "lr_schedule") c.lr_schedule = parse_enum(kLrSchedules, v, key);
    else if (key == "grad_accum") c.grad_accum = static_cast<int>(parse_int(v, key));
    else if (key == "iterations") c.iterations = parse_int(v, key);
    else if (key == "seed") c.seed = static_cast<uint64_t>(parse_int(v, key));
    else if (key == "threshold_mode") c.threshold.mode = parse_enum(kThrModes, v, key);
    else if (key == "threshold_tau") c.threshold.tau = parse_real(v, key);
    else if (key == "num_classes") c.num_classes = static_cast<int>(parse_int(v, key));
    else if (key == "num_folds") c.num_folds = static_cast<int>(parse_int(v, key));
    else if (key == "fold_index") c.fold_index = static_cast<int>(parse_int(v, key));
    else if (key == "images_per_class") c.images_per_class = static_cast<int>(parse_int(v, key));
    else if (key == "eval_episodes") c.eval_episodes = static_cast<int>(parse_int(v, key));
    else throw std::invalid_argument("config: unknown key: " + key);
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not `key = value`");
        apply_override(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::pair<double, double> RunConfig::variance_pair() const {
    switch (variance_preset) {
        case VariancePreset::kNarrow: return {0.00085, 0.012};
        case VariancePreset::kWide: return {0.0272, 0.384};
        case VariancePreset::kCustom: return {beta_start, beta_end};
    }
    return {beta_start, beta_end};
}

void RunConfig::validate() const {
    unet_config().validate();
    generation_config().validate();
    if (canvas % codec_factor != 0)
        throw std::invalid_argument("config: canvas must be divisible by codec_factor");
    int grid = canvas / codec_factor;
    if (grid % (1 << (levels - 1)) != 0)
        throw std::invalid_argument("config: latent grid not divisible across levels");
    if (n_shot_train_min < 1 || n_shot_train_min > n_shot_train_max)
        throw std::invalid_argument("config: need 1 <= n_shot_train_min <= n_shot_train_max");
    if (n_shot_infer < 1) throw std::invalid_argument("config: n_shot_infer must be >= 1");
    if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be >= 0");
    if (grad_accum < 1) throw std::invalid_argument("config: grad_accum must be >= 1");
    if (iterations < 0) throw std::invalid_argument("config: iterations must be >= 0");
    if (threshold.tau <= 0.0 || threshold.tau >= 1.0)
        throw std::invalid_argument("config: threshold_tau must lie in (0,1)");
    if (eval_episodes < 1) throw std::invalid_argument("config: eval_episodes must be >= 1");
    if (num_classes < 1 || images_per_class < 1)
        throw std::invalid_argument("config: dataset sizes must be positive");
}

UNetConfig RunConfig::unet_config() const {
    UNetConfig u;
    u.levels = levels;
    u.widths = widths;
    u.blocks_per_level = blocks_per_level;
    u.latent_channels = 3 * codec_factor * codec_factor;
    u.head_dim = head_dim;
    u.image_size = canvas;
    u.patch_size = patch_size;
    u.ctx_dim = ctx_dim;
    u.time_embed_dim = time_embed_dim;
    u.interaction = interaction;
    u.injection = injection;
    u.mul_domain = mul_domain;
    u.fusion = fusion;
    u.fusion_enabled = fusion_enabled;
    u.fill_query_with_image = fill_query_with_image;
    return u;
}

GenerationConfig RunConfig::generation_config() const {
    GenerationConfig g;
    g.process = process;
    g.steps = process == Process::kOneStep ? 1 : steps;
    g.schedule_steps = schedule_steps;
    auto [b0, b1] = variance_pair();
    g.beta_start = b0;
    g.beta_end = b1;
    g.ensemble = ensemble;
    return g;
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream out;
    out << "interaction = " << enum_name(kInteractions, c.interaction) << "\n";
    out << "injection = " << enum_name(kInjections, c.injection) << "\n";
    out << "multiplication_domain = " << enum_name(kMulDomains, c.mul_domain) << "\n";
    out << "fusion_strategy = " << enum_name(kFusions, c.fusion) << "\n";
    out << "supervision = " << enum_name(kForms, c.supervision) << "\n";
    out << "levels = " << c.levels << "\n";
    out << "widths = ";
    for (size_t i = 0; i < c.widths.size(); ++i) out << (i ? "," : "") << c.widths[i];
    out << "\n";
    out << "blocks_per_level = " << c.blocks_per_level << "\n";
    out << "head_dim = " << c.head_dim << "\n";
    out << "ctx_dim = " << c.ctx_dim << "\n";
    out << "patch_size = " << c.patch_size << "\n";
    out << "time_embed_dim = " << c.time_embed_dim << "\n";
    out << "canvas = " << c.canvas << "\n";
    out << "codec_factor = " << c.codec_factor << "\n";
    out << "fill_query_with_image = " << (c.fill_query_with_image ? "true" : "false") << "\n";
    out << "fusion_enabled = ";
    if (c.fusion_enabled.empty()) {
        out << "all";
    } else {
        for (size_t i = 0; i < c.fusion_enabled.size(); ++i)
            out << (i ? "," : "") << (c.fusion_enabled[i] ? "1" : "0");
    }
    out << "\n";
    out << "process = " << enum_name(kProcesses, c.process) << "\n";
    out << "steps = " << c.steps << "\n";
    out << "schedule_steps = " << c.schedule_steps << "\n";
    out << "variance_preset = " << enum_name(kPresets, c.variance_preset) << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", c.beta_start);
    out << "beta_start = " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.beta_end);
    out << "beta_end = " << buf << "\n";
    out << "ensemble = " << c.ensemble << "\n";
    out << "n_shot_train_min = " << c.n_shot_train_min << "\n";
    out << "n_shot_train_max = " << c.n_shot_train_max << "\n";
    out << "n_shot_infer = " << c.n_shot_infer << "\n";
    out << "infer_kv_sampling = " << (c.infer_kv_sampling ? "true" : "false") << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.lr);
    out << "lr = " << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.weight_decay);
    out << "weight_decay = " << buf << "\n";
    out << "lr_schedule = " << enum_name(kLrSchedules, c.lr_schedule) << "\n";
    out << "grad_accum = " << c.grad_accum << "\n";
    out << "iterations = " << c.iterations << "\n";
    out << "seed = " << c.seed << "\n";
    out << "threshold_mode = " << enum_name(kThrModes, c.threshold.mode) << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.threshold.tau);
    out << "threshold_tau = " << buf << "\n";
    out << "num_classes = " << c.num_classes << "\n";
    out << "num_folds = " << c.num_folds << "\n";
    out << "fold_index = " << c.fold_index << "\n";
    out << "images_per_class = " << c.images_per_class << "\n";
    out << "eval_episodes = " << c.eval_episodes << "\n";
    return out.str();
}

std::string config_json(const RunConfig& c) {
    nlohmann::json j;
    std::stringstream ss(serialize_config(c));
    std::string line;
    while (std::getline(ss, line)) {
        size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        j[key] = val;
    }
    return j.dump(2) + "\n";
}

}  // namespace fewseg
