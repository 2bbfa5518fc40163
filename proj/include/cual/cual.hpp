#pragma once

#include "cual/benchmark.hpp"
#include "cual/commands.hpp"
#include "cual/config.hpp"
#include "cual/embedding_store.hpp"
#include "cual/heads.hpp"
#include "cual/loop.hpp"
#include "cual/replay.hpp"
#include "cual/rng.hpp"
#include "cual/scoring.hpp"
#include "cual/subspace.hpp"
