#pragma once

#include "petrep/admm.hpp"
#include "petrep/baselines.hpp"
#include "petrep/error.hpp"
#include "petrep/forward_model.hpp"
#include "petrep/image.hpp"
#include "petrep/io.hpp"
#include "petrep/metrics.hpp"
#include "petrep/neuralnet.hpp"
#include "petrep/optimizers.hpp"
#include "petrep/png.hpp"
#include "petrep/poisson_model.hpp"
#include "petrep/random.hpp"
#include "petrep/simulator.hpp"
