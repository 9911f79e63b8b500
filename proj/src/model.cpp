#include "mpgat/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace mpgat {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

constexpr double kMaskFill = -9e15;

// s[.., i] = half_of(w)^T x[.., i, :]. w is a [2D] score vector; `second`
// selects which D-half scores the right-hand operand of a pair.
Tensor half_scores(const Tensor& x, const Tensor& w, bool second) {
  const int64_t d = x.shape().back();
  require(w.rank() == 1 && w.shape()[0] == 2 * d,
          "attention: score vector must have length 2 x " + std::to_string(d));
  Tensor half = slice_axis0(w, second ? d : 0, second ? 2 * d : d);
  Tensor s = linear_lastdim(x, reshape(half, {d, 1}));
  Shape out(x.shape());
  out.pop_back();
  return reshape(s, out);
}

// x [.., G, D] -> row-stochastic [.., G, G]. e_ij = w^T (x_i || x_j), split as
// w1^T x_i + w2^T x_j; mask (same shape as e, nonzero = blocked) is applied
// before the LeakyReLU-softmax, forcing exact zeros at blocked positions.
Tensor attention_rows(const Tensor& x, const Tensor& w, const Tensor& mask, double slope) {
  Tensor s1 = half_scores(x, w, false);
  Tensor s2 = half_scores(x, w, true);
  Tensor e = pairwise_add(s1, s2);
  if (mask.defined()) e = masked_fill(e, mask, kMaskFill);
  return softmax_lastdim(leaky_relu(e, slope));
}

// One feature-attention layer at every leading position: [.., F, D'] -> same.
Tensor mgat_apply(const Tensor& h, const Tensor& wc, double slope) {
  Tensor a = attention_rows(h, wc, Tensor(), slope);
  return relu(batch_matmul(a, h));
}

// Depth recursion v_u = (1-beta) v_in + beta A v_{u-1} applied across the node
// axis at every (channel, time) position, then all depths mixed back to D''.
// v [.., N, D, T]; a [.., N, N]; delta [D x (U+1)D].
Tensor propagate_mix(const Tensor& v, const Tensor& a, double beta, int64_t u,
                     const Tensor& delta) {
  require(v.rank() >= 3, "propagate: input must be [.., N, D, T]");
  require(a.rank() + 1 == v.rank(), "propagate: attention rank must be input rank - 1");
  require(beta >= 0.0 && beta <= 1.0, "propagate: beta must lie in [0,1]");
  require(u >= 0, "propagate: depth must be >= 0");
  const Shape& vs = v.shape();
  const size_t r = vs.size();
  const int64_t n = vs[r - 3], d = vs[r - 2], t = vs[r - 1];
  require(a.shape()[a.rank() - 2] == n && a.shape()[a.rank() - 1] == n,
          "propagate: attention must be [.., N, N]");

  Shape flat(vs);
  flat.pop_back();
  flat.pop_back();
  flat.push_back(d * t);  // [.., N, D*T]
  Tensor v0 = reshape(v, flat);

  std::vector<Tensor> depths;
  depths.reserve(static_cast<size_t>(u) + 1);
  depths.push_back(v);
  Tensor prev = v0;
  for (int64_t mu = 1; mu <= u; ++mu) {
    Tensor cur = add(scale(v0, 1.0 - beta), scale(batch_matmul(a, prev), beta));
    depths.push_back(reshape(cur, vs));
    prev = cur;
  }
  Tensor cat = depths.size() == 1 ? depths[0] : concat(depths, static_cast<int64_t>(r) - 2);
  return channel_linear(cat, delta);
}

// One attention-propagation branch: builds the (masked) matrix from the
// time-mean node summaries, then propagates. mask undefined = complete graph.
Tensor pgat_direction(const Tensor& v, const Tensor& mask, const Tensor& wp,
                      const Tensor& delta, double beta, int64_t u, double slope) {
  Tensor summary = mean_lastdim(v);  // [.., N, D]
  Tensor a = attention_rows(summary, wp, mask, slope);
  return propagate_mix(v, a, beta, u, delta);
}

}  // namespace

int64_t ModelConfig::receptive_field() const {
  int64_t sum = 0;
  for (int64_t k = 0; k < n_blocks; ++k) sum += dilation(k);
  return 1 + (kernel - 1) * sum;
}

void ModelConfig::validate() const {
  require(n_nodes >= 1, "config: n_nodes must be >= 1");
  require(n_features >= 1, "config: n_features must be >= 1");
  require(t_in >= 1 && t_out >= 1, "config: t_in and t_out must be >= 1");
  require(d_latent >= 1 && d_residual >= 1 && d_skip >= 1 && d_end >= 1,
          "config: latent widths must be >= 1");
  require(n_blocks >= 1 && kernel >= 1, "config: n_blocks and kernel must be >= 1");
  require(beta >= 0.0 && beta <= 1.0, "config: beta must lie in [0,1]");
  require(prop_steps >= 0, "config: prop_steps must be >= 0");
  require(leaky_slope > 0.0 && leaky_slope < 1.0, "config: leaky_slope must lie in (0,1)");
  require(receptive_field() >= t_in,
          "config: receptive field " + std::to_string(receptive_field()) +
              " does not cover t_in " + std::to_string(t_in));
}

Tensor project_multivariate(const Tensor& x, const Tensor& w) {
  require(x.rank() == 3, "project_multivariate: input must be [F, N, T]");
  const Shape& s = x.shape();
  Tensor lifted = feature_lift(reshape(x, {1, s[0], s[1], s[2]}), w);
  return reshape(lifted, {s[0], s[1], s[2], w.shape()[1]});
}

Tensor mgat_attention(const Tensor& h, const Tensor& wc, double slope) {
  require(h.rank() == 2, "mgat_attention: input must be [F, D']");
  return attention_rows(h, wc, Tensor(), slope);
}

Tensor mgat_layer(const Tensor& h, const Tensor& wc, double slope) {
  require(h.rank() == 4, "mgat_layer: input must be [F, N, T, D']");
  Tensor positioned = permute(h, {1, 2, 0, 3});  // [N, T, F, D']
  Tensor out = mgat_apply(positioned, wc, slope);
  return permute(out, {2, 0, 1, 3});
}

Tensor distill_q(const Tensor& h, const Tensor& w_post) {
  require(h.rank() == 4, "distill_q: input must be [F, N, T, D']");
  Tensor hq = select_axis(h, 0, 0);                     // [N, T, D']
  return permute(linear_lastdim(hq, w_post), {0, 2, 1});  // [N, D'', T]
}

Tensor pgat_attention_matrix(const Tensor& v, const DirectionalAdjacency& adj,
                             const Tensor& wp, double slope) {
  require(v.rank() == 3, "pgat_attention_matrix: input must be [N, D'', T]");
  require(static_cast<int64_t>(adj.neighbor_sets.size()) == v.shape()[0],
          "pgat_attention_matrix: adjacency size disagrees with input");
  Tensor mask;
  if (adj.direction != Direction::global) mask = adjacency_mask(adj);
  return attention_rows(mean_lastdim(v), wp, mask, slope);
}

Tensor pgat_propagate(const Tensor& v, const Tensor& a, double beta, int64_t u,
                      const Tensor& delta) {
  return propagate_mix(v, a, beta, u, delta);
}

Tensor pgat_block(const Tensor& v, const IntersectionGraph& graph, const Tensor& wp_fwd,
                  const Tensor& delta_fwd, const Tensor& wp_bwd, const Tensor& delta_bwd,
                  const Tensor& wp_glob, const Tensor& delta_glob, double beta, int64_t u,
                  double slope) {
  require(v.rank() == 3 && v.shape()[0] == graph.n, "pgat_block: input must be [N, D'', T]");
  Tensor mask_fwd = adjacency_mask(build_adjacency(graph, Direction::forward));
  Tensor mask_bwd = adjacency_mask(build_adjacency(graph, Direction::backward));
  Tensor out = pgat_direction(v, mask_fwd, wp_fwd, delta_fwd, beta, u, slope);
  out = add(out, pgat_direction(v, mask_bwd, wp_bwd, delta_bwd, beta, u, slope));
  out = add(out, pgat_direction(v, Tensor(), wp_glob, delta_glob, beta, u, slope));
  return out;
}

Tensor tcn_forward(const Tensor& v, const Tensor& w_filter, const Tensor& w_gate,
                   int64_t dilation) {
  Tensor f = dilated_causal_conv1d(v, w_filter, dilation);
  Tensor g = dilated_causal_conv1d(v, w_gate, dilation);
  return mul(tanh_t(f), sigmoid_t(g));
}

namespace {

MpgatParams init_params(const ModelConfig& c, uint64_t seed) {
  c.validate();
  std::mt19937_64 gen(seed);
  auto mat = [&gen](int64_t rows, int64_t cols, int64_t fan_in) {
    return randn({rows, cols}, gen, std::sqrt(1.0 / static_cast<double>(fan_in)), true);
  };
  MpgatParams p;
  p.input_proj = randn({c.n_features, c.d_latent}, gen, 0.5, true);
  // Small score vectors start every attention row near uniform.
  p.mgat1_wc = randn({2 * c.d_latent}, gen, 0.1, true);
  p.mgat2_wc = randn({2 * c.d_latent}, gen, 0.1, true);
  p.post_proj = mat(c.d_latent, c.d_residual, c.d_latent);
  const int64_t dm = c.d_residual;
  const int64_t dcat = (c.prop_steps + 1) * dm;
  p.blocks.resize(static_cast<size_t>(c.n_blocks));
  for (BlockParams& b : p.blocks) {
    const double conv_std = std::sqrt(1.0 / static_cast<double>(dm * c.kernel));
    b.tcn_filter = randn({dm, dm, c.kernel}, gen, conv_std, true);
    b.tcn_gate = randn({dm, dm, c.kernel}, gen, conv_std, true);
    b.wp_fwd = randn({2 * dm}, gen, 0.1, true);
    b.wp_bwd = randn({2 * dm}, gen, 0.1, true);
    b.wp_glob = randn({2 * dm}, gen, 0.1, true);
    b.delta_fwd = mat(dm, dcat, dcat);
    b.delta_bwd = mat(dm, dcat, dcat);
    b.delta_glob = mat(dm, dcat, dcat);
    b.res = mat(dm, dm, dm);
    b.skip = mat(dm, c.d_skip, dm);
  }
  p.head_w1 = mat(c.d_skip, c.d_end, c.d_skip);
  p.head_b1 = Tensor({c.d_end}, 0.0, true);
  p.head_w2 = mat(c.d_end, c.t_out, c.d_end);
  p.head_b2 = Tensor({c.t_out}, 0.0, true);
  return p;
}

void check_shape(const Tensor& t, const Shape& want, const std::string& name) {
  require(t.defined(), "params: missing tensor " + name);
  require(t.shape() == want, "params: " + name + " has shape " + shape_str(t.shape()) +
                                 ", expected " + shape_str(want));
}

}  // namespace

MpgatModel::MpgatModel(ModelConfig cfg, IntersectionGraph graph, uint64_t seed)
    : MpgatModel(cfg, graph, init_params(cfg, seed)) {}

MpgatModel::MpgatModel(ModelConfig cfg, IntersectionGraph graph, MpgatParams params)
    : cfg_(std::move(cfg)), graph_(std::move(graph)), params_(std::move(params)) {
  cfg_.validate();
  validate_graph(graph_);
  require(graph_.n == cfg_.n_nodes, "model: graph has " + std::to_string(graph_.n) +
                                        " nodes, config expects " +
                                        std::to_string(cfg_.n_nodes));
  check_param_shapes();
  mask_fwd_ = adjacency_mask(build_adjacency(graph_, Direction::forward));
  mask_bwd_ = adjacency_mask(build_adjacency(graph_, Direction::backward));
}

void MpgatModel::check_param_shapes() const {
  const ModelConfig& c = cfg_;
  const int64_t dm = c.d_residual;
  const int64_t dcat = (c.prop_steps + 1) * dm;
  check_shape(params_.input_proj, {c.n_features, c.d_latent}, "input_proj");
  check_shape(params_.mgat1_wc, {2 * c.d_latent}, "mgat1_wc");
  check_shape(params_.mgat2_wc, {2 * c.d_latent}, "mgat2_wc");
  check_shape(params_.post_proj, {c.d_latent, dm}, "post_proj");
  require(static_cast<int64_t>(params_.blocks.size()) == c.n_blocks,
          "params: expected " + std::to_string(c.n_blocks) + " blocks");
  for (size_t k = 0; k < params_.blocks.size(); ++k) {
    const BlockParams& b = params_.blocks[k];
    const std::string tag = "block" + std::to_string(k) + "_";
    check_shape(b.tcn_filter, {dm, dm, c.kernel}, tag + "tcn_filter");
    check_shape(b.tcn_gate, {dm, dm, c.kernel}, tag + "tcn_gate");
    check_shape(b.wp_fwd, {2 * dm}, tag + "wp_fwd");
    check_shape(b.wp_bwd, {2 * dm}, tag + "wp_bwd");
    check_shape(b.wp_glob, {2 * dm}, tag + "wp_glob");
    check_shape(b.delta_fwd, {dm, dcat}, tag + "delta_fwd");
    check_shape(b.delta_bwd, {dm, dcat}, tag + "delta_bwd");
    check_shape(b.delta_glob, {dm, dcat}, tag + "delta_glob");
    check_shape(b.res, {dm, dm}, tag + "res");
    check_shape(b.skip, {dm, c.d_skip}, tag + "skip");
  }
  check_shape(params_.head_w1, {c.d_skip, c.d_end}, "head_w1");
  check_shape(params_.head_b1, {c.d_end}, "head_b1");
  check_shape(params_.head_w2, {c.d_end, c.t_out}, "head_w2");
  check_shape(params_.head_b2, {c.t_out}, "head_b2");
}

Tensor MpgatModel::forward(const Tensor& x) const {
  require(x.rank() == 4, "forward: input must be [B, F, N, T]");
  const Shape& s = x.shape();
  require(s[1] == cfg_.n_features && s[2] == cfg_.n_nodes && s[3] == cfg_.t_in,
          "forward: input shape " + shape_str(s) + " disagrees with config [B, " +
              std::to_string(cfg_.n_features) + ", " + std::to_string(cfg_.n_nodes) + ", " +
              std::to_string(cfg_.t_in) + "]");
  const int64_t b = s[0];

  Tensor h = feature_lift(x, params_.input_proj);  // [B, F, N, T, D']
  Tensor hp = permute(h, {0, 2, 3, 1, 4});         // [B, N, T, F, D']
  hp = mgat_apply(hp, params_.mgat1_wc, cfg_.leaky_slope);
  hp = mgat_apply(hp, params_.mgat2_wc, cfg_.leaky_slope);
  Tensor hq = select_axis(hp, 3, 0);                       // [B, N, T, D']
  Tensor v = permute(linear_lastdim(hq, params_.post_proj), {0, 1, 3, 2});  // [B, N, D'', T]

  Tensor mask_f = repeat_leading(mask_fwd_, b);
  Tensor mask_b = repeat_leading(mask_bwd_, b);

  Tensor skip_sum;
  for (int64_t k = 0; k < cfg_.n_blocks; ++k) {
    const BlockParams& bp = params_.blocks[static_cast<size_t>(k)];
    Tensor t = tcn_forward(v, bp.tcn_filter, bp.tcn_gate, cfg_.dilation(k));
    Tensor tap = linear_lastdim(select_axis(t, 3, cfg_.t_in - 1), bp.skip);  // [B, N, d_skip]
    skip_sum = skip_sum.defined() ? add(skip_sum, tap) : tap;

    Tensor p = pgat_direction(t, mask_f, bp.wp_fwd, bp.delta_fwd, cfg_.beta, cfg_.prop_steps,
                              cfg_.leaky_slope);
    p = add(p, pgat_direction(t, mask_b, bp.wp_bwd, bp.delta_bwd, cfg_.beta, cfg_.prop_steps,
                              cfg_.leaky_slope));
    p = add(p, pgat_direction(t, Tensor(), bp.wp_glob, bp.delta_glob, cfg_.beta,
                              cfg_.prop_steps, cfg_.leaky_slope));
    v = add(p, channel_linear(v, bp.res));
    if (!all_finite(v))
      throw std::runtime_error("forward: non-finite activation leaving block " +
                               std::to_string(k));
  }

  Tensor head = relu(linear_lastdim(relu(skip_sum), params_.head_w1, params_.head_b1));
  return linear_lastdim(head, params_.head_w2, params_.head_b2);  // [B, N, T_out]
}

std::vector<Tensor> MpgatModel::parameters() const {
  std::vector<Tensor> out;
  out.push_back(params_.input_proj);
  out.push_back(params_.mgat1_wc);
  out.push_back(params_.mgat2_wc);
  out.push_back(params_.post_proj);
  for (const BlockParams& b : params_.blocks) {
    out.push_back(b.tcn_filter);
    out.push_back(b.tcn_gate);
    out.push_back(b.wp_fwd);
    out.push_back(b.wp_bwd);
    out.push_back(b.wp_glob);
    out.push_back(b.delta_fwd);
    out.push_back(b.delta_bwd);
    out.push_back(b.delta_glob);
    out.push_back(b.res);
    out.push_back(b.skip);
  }
  out.push_back(params_.head_w1);
  out.push_back(params_.head_b1);
  out.push_back(params_.head_w2);
  out.push_back(params_.head_b2);
  return out;
}

std::vector<std::string> MpgatModel::parameter_names() const {
  std::vector<std::string> out = {"input_proj", "mgat1_wc", "mgat2_wc", "post_proj"};
  for (int64_t k = 0; k < cfg_.n_blocks; ++k) {
    const std::string tag = "block" + std::to_string(k) + "_";
    for (const char* leaf : {"tcn_filter", "tcn_gate", "wp_fwd", "wp_bwd", "wp_glob",
                             "delta_fwd", "delta_bwd", "delta_glob", "res", "skip"})
      out.push_back(tag + leaf);
  }
  out.insert(out.end(), {"head_w1", "head_b1", "head_w2", "head_b2"});
  return out;
}

}  // namespace mpgat
