#pragma once

#include "crosswatch/autodiff.hpp"
#include "crosswatch/data_model.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace crosswatch::nn {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), seeded per parameter name so a
/// parameter's initial value does not depend on which others exist.
inline ad::Tensor uniform_init(ad::Shape shape, std::size_t fan_in, std::uint64_t seed, std::string_view name) {
  ad::Tensor t(std::move(shape));
  std::mt19937_64 rng(data::mix_seed(seed, fnv1a(name)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// y = x W + b with W stored [in, out]. Biases start at zero.
struct Linear {
  ad::Parameter* weight = nullptr;
  ad::Parameter* bias = nullptr;

  static Linear create(ad::ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       std::uint64_t seed) {
    Linear l;
    l.weight = &store.add(prefix + ".w", uniform_init({in, out}, in, seed, prefix + ".w"));
    l.bias = &store.add(prefix + ".b", ad::Tensor({1, out}));
    return l;
  }

  std::size_t in() const { return weight->value.rows(); }
  std::size_t out() const { return weight->value.cols(); }

  ad::Var operator()(ad::Tape& tape, const ad::Var& x) const {
    return ad::add(ad::matmul(x, tape.param(*weight)), tape.param(*bias));
  }
};

/// z = s(x W_z + h U_z + b_z), r = s(x W_r + h U_r + b_r),
/// n = tanh(x W_n + (r * h) U_n + b_n), h' = (1 - z) * n + z * h.
struct GruCell {
  ad::Parameter *w_z = nullptr, *w_r = nullptr, *w_n = nullptr;
  ad::Parameter *u_z = nullptr, *u_r = nullptr, *u_n = nullptr;
  ad::Parameter *b_z = nullptr, *b_r = nullptr, *b_n = nullptr;

  static GruCell create(ad::ParameterStore& store, const std::string& prefix, std::size_t input, std::size_t hidden,
                        std::uint64_t seed) {
    GruCell c;
    auto w = [&](const char* n) { return &store.add(prefix + n, uniform_init({input, hidden}, input, seed, prefix + n)); };
    auto u = [&](const char* n) { return &store.add(prefix + n, uniform_init({hidden, hidden}, hidden, seed, prefix + n)); };
    auto b = [&](const char* n) { return &store.add(prefix + n, ad::Tensor({1, hidden})); };
    c.w_z = w(".w_z");
    c.w_r = w(".w_r");
    c.w_n = w(".w_n");
    c.u_z = u(".u_z");
    c.u_r = u(".u_r");
    c.u_n = u(".u_n");
    c.b_z = b(".b_z");
    c.b_r = b(".b_r");
    c.b_n = b(".b_n");
    return c;
  }

  std::size_t input_size() const { return w_z->value.rows(); }
  std::size_t hidden_size() const { return w_z->value.cols(); }

  ad::Var operator()(ad::Tape& tape, const ad::Var& x, const ad::Var& h) const {
    if (x.cols() != input_size() || h.cols() != hidden_size() || x.rows() != h.rows())
      throw ad::ShapeError("gru_cell", x.shape(), h.shape());
    using namespace ad;
    auto gate = [&](Parameter* w, Parameter* u, Parameter* b, const Var& hh) {
      return add(add(matmul(x, tape.param(*w)), matmul(hh, tape.param(*u))), tape.param(*b));
    };
    const Var z = sigmoid(gate(w_z, u_z, b_z, h));
    const Var r = sigmoid(gate(w_r, u_r, b_r, h));
    const Var n = ad::tanh(gate(w_n, u_n, b_n, mul(r, h)));
    return add(mul(one_minus(z), n), mul(z, h));
  }
};

}  // namespace crosswatch::nn
