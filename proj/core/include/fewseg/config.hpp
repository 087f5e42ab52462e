#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewseg/codec.hpp"
#include "fewseg/dataset.hpp"
#include "fewseg/generation.hpp"
#include "fewseg/unet.hpp"

namespace fewseg {

enum class LrSchedule { kLinearDecay, kConstant };
enum class VariancePreset { kNarrow, kWide, kCustom };

/// Everything one run needs: model wiring, generation process, optimizer
/// settings, data layout and evaluation protocol. Serializes to a flat
/// `key = value` file; any key can be overridden on the command line.
struct RunConfig {
    // interaction / injection / supervision
    Interaction interaction = Interaction::kKvFusion;
    Injection injection = Injection::kConcatenation;
    MulDomain mul_domain = MulDomain::kRgb;
    FusionStrategy fusion = FusionStrategy::kKv;
    SupervisionForm supervision = SupervisionForm::kWhiteOnBlack;

    // model shape
    int levels = 2;
    std::vector<int> widths = {64, 96};
    int blocks_per_level = 1;
    int head_dim = 16;
    int ctx_dim = 64;
    int patch_size = 8;
    int time_embed_dim = 64;
    int canvas = 64;
    int codec_factor = 4;
    bool fill_query_with_image = false;
    std::vector<uint8_t> fusion_enabled;  // empty = fuse at every site

    // generation process
    Process process = Process::kOneStep;
    int steps = 50;  // inference steps for the multi-step processes
    int schedule_steps = 1000;
    VariancePreset variance_preset = VariancePreset::kNarrow;
    double beta_start = 0.00085;  // used when variance_preset = custom
    double beta_end = 0.012;
    int ensemble = 1;

    // n-shot strategy
    int n_shot_train_min = 1;
    int n_shot_train_max = 1;
    int n_shot_infer = 1;
    bool infer_kv_sampling = false;

    // optimizer
    double lr = 1e-3;
    double weight_decay = 0.01;
    LrSchedule lr_schedule = LrSchedule::kLinearDecay;
    int grad_accum = 4;
    long long iterations = 2000;
    uint64_t seed = 0;

    ThresholdConfig threshold;

    // data / evaluation protocol
    int num_classes = 8;
    int num_folds = 4;
    int fold_index = 0;
    int images_per_class = 6;
    int eval_episodes = 100;

    void validate() const;
    UNetConfig unet_config() const;
    GenerationConfig generation_config() const;
    FoldSpec fold_spec() const { return FoldSpec{num_classes, num_folds, fold_index}; }
    std::pair<double, double> variance_pair() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
std::string serialize_config(const RunConfig& cfg);  // flat key = value lines
std::string config_json(const RunConfig& cfg);       // resolved config for run.json

}  // namespace fewseg
