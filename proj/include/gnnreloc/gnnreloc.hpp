#pragma once

#include "gnnreloc/error.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/tensor.hpp"
#include "gnnreloc/retrieval.hpp"
#include "gnnreloc/gnn.hpp"
#include "gnnreloc/training.hpp"
#include "gnnreloc/inference.hpp"
#include "gnnreloc/fit.hpp"
#include "gnnreloc/synth.hpp"
