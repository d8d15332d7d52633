#pragma once

#include "evoloop/model.hpp"
#include "evoloop/sandbox.hpp"

namespace evoloop {

// 1 iff every check passes on the terminal state; an empty check list passes.
// Checks naming a missing app, an app of the wrong kind, or a bad cell
// reference raise ValidationError with the top-level check index.
int evaluate_reward(const ValidatorSpec& validator, const sandbox::EnvState& terminal_state);

}  // namespace evoloop
