#include "mpgat/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mpgat/errors.hpp"

namespace mpgat {

using nlohmann::json;

void validate_graph(const IntersectionGraph& g) {
  if (g.n < 1) throw ValidationError("graph: node count must be at least 1");
  if (!g.labels.empty() && static_cast<int64_t>(g.labels.size()) != g.n)
    throw ValidationError("graph: labels present but count differs from n");
  std::set<std::pair<int64_t, int64_t>> seen;
  for (const auto& [src, dst] : g.edges) {
    if (src < 0 || src >= g.n || dst < 0 || dst >= g.n)
      throw ValidationError("graph: edge (" + std::to_string(src) + "," + std::to_string(dst) +
                               ") references a node outside [0," + std::to_string(g.n) + ")");
    if (src == dst)
      throw ValidationError("graph: self-loop stored at node " + std::to_string(src) +
                               "; self-attention is implicit");
    if (!seen.insert({src, dst}).second)
      throw ValidationError("graph: duplicate edge (" + std::to_string(src) + "," +
                               std::to_string(dst) + ")");
  }
}

IntersectionGraph parse_graph_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("graph: JSON parse failure: ") + e.what());
  }
  IntersectionGraph g;
  try {
    g.n = j.at("n").get<int64_t>();
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2)
        throw ValidationError("graph: each edge must be a [src, dst] pair");
      g.edges.emplace_back(e[0].get<int64_t>(), e[1].get<int64_t>());
    }
    if (j.contains("labels")) g.labels = j["labels"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("graph: malformed graph object: ") + e.what());
  }
  validate_graph(g);
  return g;
}

IntersectionGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("graph: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_graph_json(buf.str());
}

void save_graph(const IntersectionGraph& g, const std::string& path) {
  validate_graph(g);
  json j;
  j["n"] = g.n;
  j["edges"] = json::array();
  for (const auto& [src, dst] : g.edges) j["edges"].push_back({src, dst});
  if (!g.labels.empty()) j["labels"] = g.labels;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("graph: cannot write " + path);
  out << j.dump(2) << "\n";
}

IntersectionGraph transpose(const IntersectionGraph& g) {
  IntersectionGraph t;
  t.n = g.n;
  t.labels = g.labels;
  t.edges.reserve(g.edges.size());
  for (const auto& [src, dst] : g.edges) t.edges.emplace_back(dst, src);
  return t;
}

DirectionalAdjacency build_adjacency(const IntersectionGraph& g, Direction dir) {
  validate_graph(g);
  DirectionalAdjacency adj;
  adj.direction = dir;
  adj.neighbor_sets.assign(static_cast<size_t>(g.n), {});
  std::vector<std::set<int64_t>> sets(static_cast<size_t>(g.n));
  for (int64_t i = 0; i < g.n; ++i) sets[static_cast<size_t>(i)].insert(i);
  switch (dir) {
    case Direction::forward:
      for (const auto& [src, dst] : g.edges) sets[static_cast<size_t>(dst)].insert(src);
      break;
    case Direction::backward:
      for (const auto& [src, dst] : g.edges) sets[static_cast<size_t>(src)].insert(dst);
      break;
    case Direction::global:
      for (int64_t i = 0; i < g.n; ++i)
        for (int64_t j = 0; j < g.n; ++j) sets[static_cast<size_t>(i)].insert(j);
      break;
  }
  for (int64_t i = 0; i < g.n; ++i)
    adj.neighbor_sets[static_cast<size_t>(i)].assign(sets[static_cast<size_t>(i)].begin(),
                                                     sets[static_cast<size_t>(i)].end());
  return adj;
}

Tensor adjacency_mask(const DirectionalAdjacency& adj) {
  const int64_t n = static_cast<int64_t>(adj.neighbor_sets.size());
  Tensor mask(Shape{n, n}, 1.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j : adj.neighbor_sets[static_cast<size_t>(i)]) mask.at({i, j}) = 0.0;
  return mask;
}

IntersectionGraph default_six_node_graph() {
  // Two rows of three intersections, streets running both ways:
  //   0 - 1 - 2
  //   |   |   |
  //   3 - 4 - 5
  IntersectionGraph g;
  g.n = 6;
  const std::vector<std::pair<int64_t, int64_t>> undirected = {{0, 1}, {1, 2}, {3, 4},
                                                               {4, 5}, {0, 3}, {1, 4}, {2, 5}};
  for (const auto& [a, b] : undirected) {
    g.edges.emplace_back(a, b);
    g.edges.emplace_back(b, a);
  }
  g.labels = {"i0", "i1", "i2", "i3", "i4", "i5"};
  return g;
}

IntersectionGraph path_graph(int64_t n) {
  if (n < 1) throw ValidationError("path_graph: need at least one node");
  IntersectionGraph g;
  g.n = n;
  for (int64_t i = 0; i + 1 < n; ++i) g.edges.emplace_back(i, i + 1);
  return g;
}

}  // namespace mpgat
