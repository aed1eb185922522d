#pragma once

#include "kgemos/random.hpp"
#include "kgemos/parallel.hpp"
#include "kgemos/linalg.hpp"
#include "kgemos/io.hpp"
#include "kgemos/graph.hpp"
#include "kgemos/autodiff.hpp"
#include "kgemos/models.hpp"
#include "kgemos/mos.hpp"
#include "kgemos/kge_model.hpp"
#include "kgemos/eval.hpp"
#include "kgemos/train.hpp"
#include "kgemos/theory.hpp"
