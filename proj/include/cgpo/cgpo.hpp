#pragma once

// Everything: corpus, model, sampling, thresholds, rewards, pair building,
// training and analysis.

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "confidence.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "hash.hpp"
#include "likelihood.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "pairs.hpp"
#include "pretrain.hpp"
#include "reward.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"
