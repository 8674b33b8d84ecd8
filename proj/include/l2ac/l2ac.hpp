#pragma once

#include "l2ac/numcore.hpp"
#include "l2ac/data.hpp"
#include "l2ac/model.hpp"
#include "l2ac/pseudo.hpp"
#include "l2ac/bilevel.hpp"
#include "l2ac/eval.hpp"
#include "l2ac/io.hpp"
#include "l2ac/config.hpp"
#include "l2ac/experiment.hpp"
#include "l2ac/selfcheck.hpp"
