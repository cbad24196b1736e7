#pragma once

#include "gradshield/errors.hpp"
#include "gradshield/tensor.hpp"
#include "gradshield/rng.hpp"
#include "gradshield/tape.hpp"
#include "gradshield/serialize.hpp"
#include "gradshield/gradcheck.hpp"
#include "gradshield/params.hpp"
#include "gradshield/classifier.hpp"
#include "gradshield/gmem.hpp"
#include "gradshield/trn.hpp"
#include "gradshield/attacks.hpp"
#include "gradshield/training.hpp"
#include "gradshield/data.hpp"
#include "gradshield/harness.hpp"
