#pragma once

// Model-level helpers shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "convivit/model.hpp"
#include "convivit/ops.hpp"
#include "convivit/rng.hpp"

namespace fixture {

using namespace convivit;

// Fills every trainable tensor of a store with uniform noise so that no
// path is trivially zero (biases and shifts start at zero).
inline void randomize(ParameterStore& store, std::uint64_t seed, double range = 0.3) {
  Rng rng(seed);
  for (auto& e : store.entries()) {
    if (!e.trainable) continue;
    for (auto& v : e.tensor.mutable_data()) v = static_cast<float>(rng.uniform(-range, range));
  }
}

// Applies the same permutation to the spatial-token axis of every frame.
inline Tensor permute_tokens(const Tensor& tokens, const std::vector<std::int64_t>& perm) {
  std::vector<Tensor> parts;
  for (auto i : perm) parts.push_back(narrow(tokens, 2, i, 1));
  return concat(parts, 2);
}

// Factorized-self model sharing every parameter of `dot` whose name exists in
// both layouts, with the temporal stage's output projection set to zero.
inline ConViViT self_twin(ConViViT& dot) {
  auto c = dot.config();
  c.variant = Variant::FactorizedSelf;
  ConViViT fresh(c, 99);
  ParameterStore store;
  for (auto& e : fresh.parameters().entries()) {
    Tensor t = dot.parameters().contains(e.name) ? dot.parameters().get(e.name).clone() : e.tensor.clone();
    if (e.name.find(".attn2.o.") != std::string::npos) t = Tensor(t.shape());
    store.add(e.name, t, e.trainable);
  }
  return ConViViT(c, std::move(store));
}

}  // namespace fixture
