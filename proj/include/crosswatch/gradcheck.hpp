#pragma once

// End-to-end gradient check of the full network on a toy problem: two
// three-frame windows, horizon 2, D = 8, hidden 8, every stream enabled.

#include "crosswatch/autodiff.hpp"
#include "crosswatch/behavior_model.hpp"
#include "crosswatch/synthetic.hpp"
#include "crosswatch/training.hpp"

#include <string>
#include <vector>

namespace crosswatch::diagnostics {

struct ToyProblem {
  synthetic::SyntheticData data;
  std::vector<data::SequenceSample> windows;
  model::ModelConfig config;
};

inline ToyProblem toy_problem(std::uint64_t seed = 3) {
  synthetic::GeneratorConfig g;
  g.train = {1, 1};
  g.val = {0, 0};
  g.test = {0, 0};
  g.frames_per_track = 120;
  g.feature_dim = 8;
  g.max_neighbors = 3;
  g.station_prob = 1.0;
  ToyProblem p{synthetic::generate(g, seed), {}, {}};
  // the crosser window straddles the crossing event; the bystander one is early
  const auto& crosser = p.data.dataset.tracks[0];
  const std::size_t event = data::crossing_event(crosser).value();
  p.windows.push_back(data::cut_window(crosser, event - 1, 3));
  p.windows.push_back(data::cut_window(p.data.dataset.tracks[1], 10, 3));

  auto& c = p.config;
  c.visual_dim = 8;
  c.hidden = 8;
  c.visual_embed = 8;
  c.box_embed = 4;
  c.action_embed = 4;
  c.horizon = 2;
  c.relation.embed = 4;
  c.relation.attention_hidden = 4;
  c.relation.normalize_coordinates = true;
  c.seed = seed;
  return p;
}

/// Max relative error per parameter group.
inline std::vector<ad::ParameterCheck> toy_gradient_check(double epsilon = 1e-4, std::uint64_t seed = 3) {
  const auto p = toy_problem(seed);
  model::BehaviorModel net(p.config);
  std::vector<const data::SequenceSample*> batch;
  std::vector<training::SequenceLabels> labels;
  for (const auto& w : p.windows) {
    batch.push_back(&w);
    labels.push_back(training::labels_of(w));
  }
  return ad::grad_check_parameters(net.params(), [&](ad::Tape& tape) {
    const auto steps = net.forward(tape, batch, p.data.features);
    return training::multitask_loss(tape, steps, labels, {0.5, 1.0, 1.0});
  }, epsilon);
}

}  // namespace crosswatch::diagnostics
