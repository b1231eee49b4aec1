#pragma once

// Umbrella header.

#include "protext/commands.hpp"
#include "protext/common.hpp"
#include "protext/dataset.hpp"
#include "protext/encoder.hpp"
#include "protext/llm_client.hpp"
#include "protext/optimizer.hpp"
#include "protext/synthetic.hpp"
#include "protext/tape.hpp"
#include "protext/tensor.hpp"
#include "protext/tensor_store.hpp"
#include "protext/tokenizer.hpp"
#include "protext/trainer.hpp"
#include "protext/zeroshot.hpp"
