#pragma once

#include "dctnn/error.hpp"
#include "dctnn/tensor.hpp"
#include "dctnn/linalg.hpp"
#include "dctnn/decomp.hpp"
#include "dctnn/network.hpp"
#include "dctnn/conformal.hpp"
#include "dctnn/selector.hpp"
#include "dctnn/simgen.hpp"
#include "dctnn/pipeline.hpp"
#include "dctnn/manifest.hpp"
#include "dctnn/experiment.hpp"
