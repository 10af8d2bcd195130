#pragma once

#include "analysis.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "distribution.hpp"
#include "error.hpp"
#include "lens.hpp"
#include "model.hpp"
#include "model_io.hpp"
#include "objective.hpp"
#include "optimizer.hpp"
#include "pretrain.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"
