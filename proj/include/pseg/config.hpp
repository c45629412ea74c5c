#pragma once

#include <string>
#include <vector>

#include "pseg/dataset.hpp"
#include "pseg/trainer.hpp"

namespace pseg {

// One experiment = dataset spec + train config + variant + seed list.
struct ExperimentConfig {
    DatasetSpec dataset;
    TrainConfig train;
    Variant variant = Variant::Full;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::string output_dir = "runs/exp";
    int checkpoint_every = 0;  // extra checkpoints every N epochs; 0 = final only
};

// Flat "key = value" text with [dataset] / [train] / [run] sections and '#'
// comments. Unknown sections, unknown keys, and unparsable values raise
// std::invalid_argument naming the field. The parsed config is validated.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

void validate(const ExperimentConfig& cfg);

// canonical round-trippable rendering (used to seed new experiment files)
std::string config_to_text(const ExperimentConfig& cfg);

}  // namespace pseg
