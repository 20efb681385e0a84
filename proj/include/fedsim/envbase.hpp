#pragma once

// Minimal reset/step environment interface shared by the FL attack
// environment and the toy diagnostics environment.

#include <cstdint>

#include "fedsim/nncore.hpp"

namespace fedsim {

struct StepResult {
    Vec obs;
    double reward = 0.0;
    bool done = false;
};

class EnvBase {
  public:
    virtual ~EnvBase() = default;
    virtual Vec reset(std::uint64_t seed) = 0;
    virtual StepResult step(const Vec& action) = 0;
    virtual int obs_dim() const = 0;
    virtual int act_dim() const = 0;
};

// Which sub-action the agent under training controls; the frozen counterpart
// policy supplies the other half inside the environment.
enum class TrainTarget { local_search, model_craft, joint };

struct Policy;

class TwoPolicyEnv : public EnvBase {
  public:
    virtual void configure_phase(TrainTarget target, const Policy* frozen) = 0;
};

}  // namespace fedsim
