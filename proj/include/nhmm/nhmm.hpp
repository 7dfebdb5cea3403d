// Umbrella header for the neural HMM tag-induction library.

#pragma once

#include "nhmm/common.hpp"
#include "nhmm/corpus.hpp"
#include "nhmm/gradcheck.hpp"
#include "nhmm/hmm.hpp"
#include "nhmm/metrics.hpp"
#include "nhmm/model.hpp"
#include "nhmm/optim.hpp"
#include "nhmm/serialize.hpp"
#include "nhmm/tape.hpp"
#include "nhmm/tensor.hpp"
#include "nhmm/train.hpp"
#include "nhmm/vocab.hpp"
