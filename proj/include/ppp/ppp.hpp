#pragma once

#include "ppp/error.hpp"
#include "ppp/tensor.hpp"
#include "ppp/layers.hpp"
#include "ppp/gating.hpp"
#include "ppp/model.hpp"
#include "ppp/prototypes.hpp"
#include "ppp/losses.hpp"
#include "ppp/pruning.hpp"
#include "ppp/data.hpp"
#include "ppp/harness.hpp"
