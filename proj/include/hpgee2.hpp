#pragma once

// Umbrella header.
#include "hpgee2/error.hpp"
#include "hpgee2/model.hpp"
#include "hpgee2/penalty.hpp"
#include "hpgee2/scores.hpp"
#include "hpgee2/alr.hpp"
#include "hpgee2/hpgee2.hpp"
#include "hpgee2/tuning.hpp"
#include "hpgee2/inference.hpp"
#include "hpgee2/simulator.hpp"
#include "hpgee2/io.hpp"
