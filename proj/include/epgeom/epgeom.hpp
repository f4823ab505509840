#pragma once

#include "epgeom/activation_store.hpp"
#include "epgeom/components.hpp"
#include "epgeom/core.hpp"
#include "epgeom/dimensionality.hpp"
#include "epgeom/geometry.hpp"
#include "epgeom/interventions.hpp"
#include "epgeom/pipeline.hpp"
#include "epgeom/probes.hpp"
#include "epgeom/readout.hpp"
#include "epgeom/report.hpp"
#include "epgeom/synth.hpp"
#include "epgeom/topology.hpp"
#include "epgeom/toy_model.hpp"
