#pragma once

// Randomized finite-difference checks of the loss family, shared by the CLI
// and the acceptance run.

#include <cstdint>
#include <string>

#include "vdpo/grad/grad_check.hpp"
#include "vdpo/objectives/objectives.hpp"

namespace vdpo::objectives {

enum class CheckedLoss { kDpo, kVdpoPlain, kVdpoNormalized, kSft };
const char* checked_loss_name(CheckedLoss l);

struct LossGradCheck {
  CheckedLoss loss = CheckedLoss::kDpo;
  RecordKind kind = RecordKind::kResponseContrast;
  std::uint64_t seed = 0;
  // Central differences along 8 seeded unit directions. This is the pass/fail
  // figure: single coordinates can have exact partials far below the
  // round-off of a central difference.
  grad::GradCheckReport projected;
  // Every coordinate separately; informational.
  grad::GradCheckReport coordinate;
};

// A small random policy, reference and record drawn from `seed`. Record kinds
// alternate with the seed's parity. The V-DPO guidance terms are detached,
// so differences run on the loss with them frozen at the base point.
LossGradCheck check_loss_gradient(CheckedLoss loss, std::uint64_t seed,
                                  double step = grad::kDefaultFdStep);

}  // namespace vdpo::objectives
