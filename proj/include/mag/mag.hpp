#pragma once

#include "mag/attention.hpp"
#include "mag/bench.hpp"
#include "mag/checkpoint.hpp"
#include "mag/clip_io.hpp"
#include "mag/config.hpp"
#include "mag/error.hpp"
#include "mag/flow.hpp"
#include "mag/generator.hpp"
#include "mag/gradcheck.hpp"
#include "mag/jsonl.hpp"
#include "mag/kv_cache.hpp"
#include "mag/masks.hpp"
#include "mag/memory.hpp"
#include "mag/metrics.hpp"
#include "mag/model.hpp"
#include "mag/optim.hpp"
#include "mag/pipeline.hpp"
#include "mag/report.hpp"
#include "mag/rng.hpp"
#include "mag/rope.hpp"
#include "mag/stream.hpp"
#include "mag/synthworld.hpp"
#include "mag/tensor.hpp"
