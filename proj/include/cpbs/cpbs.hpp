#pragma once

#include "cpbs/bessel_gig.hpp"
#include "cpbs/dataset.hpp"
#include "cpbs/diagnostics.hpp"
#include "cpbs/error.hpp"
#include "cpbs/estimation.hpp"
#include "cpbs/glm.hpp"
#include "cpbs/io.hpp"
#include "cpbs/mc.hpp"
#include "cpbs/model.hpp"
#include "cpbs/parallel.hpp"
#include "cpbs/sampling.hpp"
