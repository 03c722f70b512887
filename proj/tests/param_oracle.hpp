// SPDX-License-Identifier: Apache-2.0
// Hand-derived parameter counts, written from the architecture description
// rather than from the model's parameter registry.
#pragma once

#include <cstddef>

#include "vaguide/model.hpp"

namespace param_oracle {

struct Counts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

inline std::size_t linear(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t norm(std::size_t d) { return 2 * d; }

// Pre-LN transformer block of width d with MLP ratio m.
inline std::size_t transformer_block(std::size_t d, std::size_t m) {
  return norm(d) + linear(d, 3 * d) + linear(d, d) + norm(d) + linear(d, m * d) + linear(m * d, d);
}

inline std::size_t interaction_block(std::size_t r, std::size_t m) { return transformer_block(r, m); }

inline std::size_t pos_params(const vaguide::BackboneConfig &b) {
  return static_cast<std::size_t>(b.tokens()) * static_cast<std::size_t>(b.dim);
}

inline std::size_t backbone_block(const vaguide::BackboneConfig &b) {
  const std::size_t C = static_cast<std::size_t>(b.dim);
  if (b.kind == vaguide::BackboneKind::transformer) return transformer_block(C, static_cast<std::size_t>(b.mlp_ratio));
  return norm(C) + linear(9 * C, C) + linear(C, C);  // 3x3 conv then pointwise
}

inline std::size_t backbone(const vaguide::BackboneConfig &b) {
  const std::size_t C = static_cast<std::size_t>(b.dim);
  const std::size_t P = static_cast<std::size_t>(b.patch * b.patch);
  return linear(P, C) + pos_params(b) + static_cast<std::size_t>(b.depth) * backbone_block(b) + norm(C);
}

inline std::size_t planes(std::size_t H) { return 10 * (linear(H, H) + linear(H, 6)); }

inline Counts count(const vaguide::ModelConfig &c) {
  Counts out;
  const std::size_t bb = backbone(c.backbone);
  const std::size_t C = static_cast<std::size_t>(c.backbone.dim);
  const std::size_t H = static_cast<std::size_t>(c.hidden);
  const std::size_t S = static_cast<std::size_t>(c.seq_dim);
  if (c.finetune_all) {
    out.frozen = pos_params(c.backbone);
    out.trainable = bb - out.frozen;
  } else {
    out.frozen = bb;
  }
  if (c.kind == vaguide::ModelKind::single_frame) {
    std::size_t t = linear(C, H) + planes(H);
    if (c.train_last_block && !c.finetune_all) {
      t += backbone_block(c.backbone);
      out.frozen -= backbone_block(c.backbone);
    }
    out.trainable += t;
    return out;
  }
  const auto &a = c.adapter;
  const std::size_t r = static_cast<std::size_t>(a.r);
  const std::size_t L = static_cast<std::size_t>(a.L);
  const std::size_t sites = a.sites.empty() ? vaguide::default_sites(c.backbone).size() : a.sites.size();
  std::size_t per_site = linear(C, r) + linear(r, C);
  if (a.variant == vaguide::AdapterVariant::full) per_site += interaction_block(r, static_cast<std::size_t>(a.mlp_ratio));
  if (a.action_embed_per_site) per_site += linear(6, r);
  if (a.timestep_per_site) per_site += L * r;
  std::size_t t = sites * per_site;
  if (!a.action_embed_per_site) t += linear(6, r);
  if (!a.timestep_per_site) t += L * r;
  t += r;                                       // global token
  t += linear(C, S) + linear(r, S);             // stream projections
  t += 2 * S * 3 * H + 3 * H + H * 3 * H + 3 * H;  // GRU
  t += planes(H);
  out.trainable += t;
  return out;
}

}  // namespace param_oracle
