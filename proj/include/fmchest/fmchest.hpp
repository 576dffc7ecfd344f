#pragma once

// Flow-matching generative channel estimation for MIMO systems: synthetic
// clustered-channel datasets, pilot measurement and LS initialization,
// conditional flow matching training of a convolutional velocity field,
// Euler ODE sampling, an annealed-Langevin score-matching baseline, and an
// NMSE/timing benchmark harness.

#include "fmchest/bench.hpp"
#include "fmchest/channel.hpp"
#include "fmchest/checkpoint.hpp"
#include "fmchest/error.hpp"
#include "fmchest/flow.hpp"
#include "fmchest/nn.hpp"
#include "fmchest/optim.hpp"
#include "fmchest/pilot.hpp"
#include "fmchest/rng.hpp"
#include "fmchest/sampler.hpp"
#include "fmchest/score.hpp"
#include "fmchest/tensor.hpp"
