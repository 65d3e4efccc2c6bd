#pragma once

#include "exo/io.hpp"
#include "exo/stats.hpp"
#include "exo/manifold.hpp"
#include "exo/decompose.hpp"
#include "exo/mdp.hpp"
#include "exo/envs.hpp"
#include "exo/rl.hpp"
#include "exo/harness.hpp"
#include "exo/commands.hpp"
