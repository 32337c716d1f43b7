// Everything in one include.
#pragma once

#include "surgflow/bayesnet.hpp"
#include "surgflow/common.hpp"
#include "surgflow/crf.hpp"
#include "surgflow/dataset.hpp"
#include "surgflow/evalkit.hpp"
#include "surgflow/features.hpp"
#include "surgflow/lbfgs.hpp"
#include "surgflow/markov.hpp"
#include "surgflow/recognizer.hpp"
#include "surgflow/synthgen.hpp"
#include "surgflow/taxonomy.hpp"
#include "surgflow/windowing.hpp"
