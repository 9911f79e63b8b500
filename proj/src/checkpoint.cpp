#include "mpgat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <utility>

#include "mpgat/errors.hpp"

namespace mpgat {

using json = nlohmann::json;

namespace {

constexpr char kCkptMagic[] = "MPGATCKPT1\n";

json config_to_json(const ModelConfig& c) {
  return json{{"n_nodes", c.n_nodes},
              {"n_features", c.n_features},
              {"t_in", c.t_in},
              {"t_out", c.t_out},
              {"d_latent", c.d_latent},
              {"d_residual", c.d_residual},
              {"d_skip", c.d_skip},
              {"d_end", c.d_end},
              {"n_blocks", c.n_blocks},
              {"kernel", c.kernel},
              {"beta", c.beta},
              {"prop_steps", c.prop_steps},
              {"leaky_slope", c.leaky_slope}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_nodes = j.at("n_nodes").get<int64_t>();
  c.n_features = j.at("n_features").get<int64_t>();
  c.t_in = j.at("t_in").get<int64_t>();
  c.t_out = j.at("t_out").get<int64_t>();
  c.d_latent = j.at("d_latent").get<int64_t>();
  c.d_residual = j.at("d_residual").get<int64_t>();
  c.d_skip = j.at("d_skip").get<int64_t>();
  c.d_end = j.at("d_end").get<int64_t>();
  c.n_blocks = j.at("n_blocks").get<int64_t>();
  c.kernel = j.at("kernel").get<int64_t>();
  c.beta = j.at("beta").get<double>();
  c.prop_steps = j.at("prop_steps").get<int64_t>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  return c;
}

// Maps a layout name to its slot in MpgatParams. Blocks must be sized first.
Tensor* param_slot(MpgatParams& p, const std::string& name) {
  if (name == "input_proj") return &p.input_proj;
  if (name == "mgat1_wc") return &p.mgat1_wc;
  if (name == "mgat2_wc") return &p.mgat2_wc;
  if (name == "post_proj") return &p.post_proj;
  if (name == "head_w1") return &p.head_w1;
  if (name == "head_b1") return &p.head_b1;
  if (name == "head_w2") return &p.head_w2;
  if (name == "head_b2") return &p.head_b2;
  if (name.rfind("block", 0) == 0) {
    const size_t us = name.find('_');
    if (us == std::string::npos) return nullptr;
    size_t idx = 0;
    try {
      idx = static_cast<size_t>(std::stoll(name.substr(5, us - 5)));
    } catch (const std::exception&) {
      return nullptr;
    }
    if (idx >= p.blocks.size()) return nullptr;
    BlockParams& b = p.blocks[idx];
    const std::string leaf = name.substr(us + 1);
    if (leaf == "tcn_filter") return &b.tcn_filter;
    if (leaf == "tcn_gate") return &b.tcn_gate;
    if (leaf == "wp_fwd") return &b.wp_fwd;
    if (leaf == "wp_bwd") return &b.wp_bwd;
    if (leaf == "wp_glob") return &b.wp_glob;
    if (leaf == "delta_fwd") return &b.delta_fwd;
    if (leaf == "delta_bwd") return &b.delta_bwd;
    if (leaf == "delta_glob") return &b.delta_glob;
    if (leaf == "res") return &b.res;
    if (leaf == "skip") return &b.skip;
  }
  return nullptr;
}

}  // namespace

void save_checkpoint(const std::string& path, const MpgatModel& model,
                     const Normalizer& normalizer) {
  const std::vector<Tensor> tensors = model.parameters();
  const std::vector<std::string> names = model.parameter_names();

  json header;
  header["version"] = 1;
  header["config"] = config_to_json(model.config());
  json graph;
  graph["n"] = model.graph().n;
  graph["edges"] = json::array();
  for (const auto& [src, dst] : model.graph().edges) graph["edges"].push_back({src, dst});
  graph["labels"] = model.graph().labels;
  header["graph"] = graph;
  header["normalizer"] = {{"mean", normalizer.mean}, {"std", normalizer.std}};
  header["params"] = json::array();
  for (size_t i = 0; i < tensors.size(); ++i)
    header["params"].push_back({{"name", names[i]}, {"shape", tensors[i].shape()}});
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic) - 1);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const Tensor& t : tensors)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.values().size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_checkpoint: write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("load_checkpoint: cannot open " + path);
  char magic[sizeof(kCkptMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw ValidationError("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ull << 30)) throw ValidationError("load_checkpoint: corrupt header length");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ValidationError("load_checkpoint: truncated header");

  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> layout;
  try {
    const json header = json::parse(htext);
    if (header.at("version").get<int>() != 1)
      throw ValidationError("load_checkpoint: unsupported checkpoint version");
    ck.config = config_from_json(header.at("config"));
    const json& g = header.at("graph");
    ck.graph.n = g.at("n").get<int64_t>();
    for (const auto& e : g.at("edges"))
      ck.graph.edges.emplace_back(e.at(0).get<int64_t>(), e.at(1).get<int64_t>());
    ck.graph.labels = g.at("labels").get<std::vector<std::string>>();
    ck.normalizer.mean = header.at("normalizer").at("mean").get<std::vector<double>>();
    ck.normalizer.std = header.at("normalizer").at("std").get<std::vector<double>>();
    for (const auto& p : header.at("params"))
      layout.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("load_checkpoint: malformed header: ") + e.what());
  }

  ck.params.blocks.resize(static_cast<size_t>(std::max<int64_t>(ck.config.n_blocks, 0)));
  for (const auto& [name, shape] : layout) {
    Tensor* slot = param_slot(ck.params, name);
    if (slot == nullptr)
      throw ValidationError("load_checkpoint: unknown parameter name " + name);
    if (slot->defined())
      throw ValidationError("load_checkpoint: duplicate parameter name " + name);
    std::vector<double> values(static_cast<size_t>(numel_of(shape)));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw ValidationError("load_checkpoint: truncated payload at " + name);
    *slot = Tensor(shape, std::move(values), true);
  }
  return ck;
}

MpgatModel model_from_checkpoint(Checkpoint ck) {
  return MpgatModel(std::move(ck.config), std::move(ck.graph), std::move(ck.params));
}

}  // namespace mpgat
