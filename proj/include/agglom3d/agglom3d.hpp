#pragma once

#include "agglom3d/binary_io.hpp"
#include "agglom3d/config.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/evalsuite.hpp"
#include "agglom3d/fusion.hpp"
#include "agglom3d/geometry.hpp"
#include "agglom3d/objective.hpp"
#include "agglom3d/pipeline.hpp"
#include "agglom3d/rng.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/student.hpp"
#include "agglom3d/teachers.hpp"
#include "agglom3d/trainer.hpp"
