#pragma once

#include "itexp/error.hpp"
#include "itexp/treebank.hpp"
#include "itexp/transform.hpp"
#include "itexp/vocab.hpp"
#include "itexp/leveler.hpp"
#include "itexp/predictor.hpp"
#include "itexp/generate.hpp"
#include "itexp/neural.hpp"
#include "itexp/eval.hpp"
