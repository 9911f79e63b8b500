#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mpgat/graph.hpp"
#include "mpgat/ops.hpp"
#include "mpgat/tensor.hpp"

// The forecasting network: a per-position feature-graph attention stage that
// distills the multivariate input channels into one latent stream, followed by
// a stack of gated dilated causal convolution blocks interleaved with masked
// spatial attention propagation over the intersection graph, with residual and
// skip wiring into a two-layer output head.

namespace mpgat {

struct ModelConfig {
  int64_t n_nodes = 0;
  int64_t n_features = 4;
  int64_t t_in = 12;
  int64_t t_out = 12;
  int64_t d_latent = 32;    // width of the per-feature lifted representation
  int64_t d_residual = 32;  // channel width inside the block stack
  int64_t d_skip = 64;
  int64_t d_end = 128;
  int64_t n_blocks = 8;
  int64_t kernel = 2;
  double beta = 0.05;      // share of neighbor state mixed in per propagation step
  int64_t prop_steps = 2;  // propagation recursion depth U
  double leaky_slope = 0.2;

  // Blocks alternate dilation 1, 2, 1, 2, ...
  int64_t dilation(int64_t block) const { return block % 2 == 0 ? 1 : 2; }
  // 1 + (K-1) * sum of dilations; must cover t_in.
  int64_t receptive_field() const;
  void validate() const;
};

struct BlockParams {
  Tensor tcn_filter;  // [D'' x D'' x K]
  Tensor tcn_gate;    // [D'' x D'' x K]
  Tensor wp_fwd, wp_bwd, wp_glob;           // [2 D''] attention score vectors
  Tensor delta_fwd, delta_bwd, delta_glob;  // [D'' x (U+1) D''] depth mixers
  Tensor res;                               // [D'' x D'']
  Tensor skip;                              // [D'' x d_skip]
};

struct MpgatParams {
  Tensor input_proj;          // [F x D'] per-feature scalar-to-vector lift
  Tensor mgat1_wc, mgat2_wc;  // [2 D'] feature-attention score vectors
  Tensor post_proj;           // [D' x D'']
  std::vector<BlockParams> blocks;
  Tensor head_w1, head_b1;  // [d_skip x d_end], [d_end]
  Tensor head_w2, head_b2;  // [d_end x t_out], [t_out]
};

// Stage functions, single-sample shapes. The batched forward in MpgatModel is
// built from the same internals; these entry points exist so each stage can be
// exercised in isolation.

// x [F x N x T], w [F x D'] -> [F x N x T x D']; bias-free.
Tensor project_multivariate(const Tensor& x, const Tensor& w);

// h [F x D'] (one node, one time step) -> row-stochastic [F x F].
Tensor mgat_attention(const Tensor& h, const Tensor& wc, double slope);

// h [F x N x T x D'] -> same shape: attention over the feature axis at every
// (node, time) position, then ReLU.
Tensor mgat_layer(const Tensor& h, const Tensor& wc, double slope);

// Keeps only feature channel 0, projects D' -> D'', reorders to [N x D'' x T].
Tensor distill_q(const Tensor& h, const Tensor& w_post);

// v [N x D'' x T] -> [N x N]; rows sum to 1, exact zeros outside adj.
Tensor pgat_attention_matrix(const Tensor& v, const DirectionalAdjacency& adj,
                             const Tensor& wp, double slope);

// Depth-U recursion v_u = (1-beta) v_in + beta A v_{u-1}, all depths
// concatenated on the channel axis and mixed back to D'' by delta.
// v [N x D'' x T] or [B x N x D'' x T]; a [N x N] or [B x N x N].
Tensor pgat_propagate(const Tensor& v, const Tensor& a, double beta, int64_t u,
                      const Tensor& delta);

// Sum of forward, backward, and global attention-propagation branches.
Tensor pgat_block(const Tensor& v, const IntersectionGraph& graph, const Tensor& wp_fwd,
                  const Tensor& delta_fwd, const Tensor& wp_bwd, const Tensor& delta_bwd,
                  const Tensor& wp_glob, const Tensor& delta_glob, double beta, int64_t u,
                  double slope);

// Gated unit tanh(conv_f(v)) * sigmoid(conv_g(v)), dilated causal.
// v [.. x D'' x T] -> same shape.
Tensor tcn_forward(const Tensor& v, const Tensor& w_filter, const Tensor& w_gate,
                   int64_t dilation);

class MpgatModel {
 public:
  // Fresh model with randomly initialized parameters (deterministic in seed).
  MpgatModel(ModelConfig cfg, IntersectionGraph graph, uint64_t seed);
  // Rebuild around existing parameters (checkpoint load); shapes are checked.
  MpgatModel(ModelConfig cfg, IntersectionGraph graph, MpgatParams params);

  // x [B x F x N x T_in] (normalized units) -> [B x N x T_out].
  Tensor forward(const Tensor& x) const;

  // Stable-ordered views of every learnable tensor; the order matches
  // parameter_names() and is the checkpoint serialization order. The returned
  // handles share storage with the model, so optimizer updates apply in place.
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;

  const ModelConfig& config() const { return cfg_; }
  const IntersectionGraph& graph() const { return graph_; }
  const MpgatParams& params() const { return params_; }
  MpgatParams& params() { return params_; }

 private:
  ModelConfig cfg_;
  IntersectionGraph graph_;
  MpgatParams params_;
  Tensor mask_fwd_, mask_bwd_;  // [N x N] blocked-position masks, not learned

  void check_param_shapes() const;
};

}  // namespace mpgat
