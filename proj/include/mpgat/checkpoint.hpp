#pragma once

#include <string>

#include "mpgat/features.hpp"
#include "mpgat/graph.hpp"
#include "mpgat/model.hpp"

// Versioned binary checkpoint: a magic line, a JSON header (config, graph,
// normalizer, parameter layout), then the raw little-endian parameter values
// in layout order. Round trips bit-exactly.

namespace mpgat {

struct Checkpoint {
  ModelConfig config;
  IntersectionGraph graph;
  Normalizer normalizer;
  MpgatParams params;
};

void save_checkpoint(const std::string& path, const MpgatModel& model,
                     const Normalizer& normalizer);

Checkpoint load_checkpoint(const std::string& path);

// Rebuilds a trainable model around the loaded parameters.
MpgatModel model_from_checkpoint(Checkpoint ck);

}  // namespace mpgat
