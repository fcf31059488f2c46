#pragma once

// Single include for the whole library.

#include "permgen/common.hpp"
#include "permgen/tensor.hpp"
#include "permgen/vocab.hpp"
#include "permgen/corpus.hpp"
#include "permgen/toy.hpp"
#include "permgen/sequence.hpp"
#include "permgen/model.hpp"
#include "permgen/checkpoint.hpp"
#include "permgen/trainer.hpp"
#include "permgen/decoder.hpp"
#include "permgen/metrics.hpp"
#include "permgen/runconfig.hpp"
