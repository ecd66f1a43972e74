#pragma once

#include "poar/catalog.hpp"
#include "poar/evaluator.hpp"
#include "poar/gradcheck.hpp"
#include "poar/loss.hpp"
#include "poar/model.hpp"
#include "poar/synth.hpp"
#include "poar/trainer.hpp"
