#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mpgat/tensor.hpp"

namespace mpgat {

struct IntersectionGraph {
  int64_t n = 0;
  std::vector<std::pair<int64_t, int64_t>> edges;  // directed (src, dst), no self-loops stored
  std::vector<std::string> labels;                 // optional, size n when present
};

enum class Direction { forward, backward, global };

struct DirectionalAdjacency {
  Direction direction;
  std::vector<std::vector<int64_t>> neighbor_sets;  // sorted; always contains the node itself
};

IntersectionGraph parse_graph_json(const std::string& text);
IntersectionGraph load_graph(const std::string& path);
void save_graph(const IntersectionGraph& g, const std::string& path);
void validate_graph(const IntersectionGraph& g);

IntersectionGraph transpose(const IntersectionGraph& g);

// forward: node i attends over its in-neighbors {j : (j,i) in E} plus itself;
// backward: over out-neighbors; global: over every node.
DirectionalAdjacency build_adjacency(const IntersectionGraph& g, Direction dir);

// N x N tensor with 1.0 where attention must be blocked (j not in N_i) and
// 0.0 where it is allowed; feeds masked_fill before the attention softmax.
Tensor adjacency_mask(const DirectionalAdjacency& adj);

// Bidirectional 2x3 grid used when no graph file is supplied.
IntersectionGraph default_six_node_graph();

// Directed chain 0 -> 1 -> ... -> n-1, the topology of the synthetic generator.
IntersectionGraph path_graph(int64_t n);

}  // namespace mpgat
