#pragma once

// Umbrella header for the shadow-pool privacy auditing toolkit.

#include "shadowpool/attacks.hpp"
#include "shadowpool/config.hpp"
#include "shadowpool/cost.hpp"
#include "shadowpool/dataset.hpp"
#include "shadowpool/gradcheck.hpp"
#include "shadowpool/io.hpp"
#include "shadowpool/mapping.hpp"
#include "shadowpool/matrix.hpp"
#include "shadowpool/metrics.hpp"
#include "shadowpool/nn.hpp"
#include "shadowpool/optim.hpp"
#include "shadowpool/pipeline.hpp"
#include "shadowpool/pool.hpp"
#include "shadowpool/rng.hpp"
#include "shadowpool/scores.hpp"
#include "shadowpool/shadow.hpp"
#include "shadowpool/validation.hpp"
