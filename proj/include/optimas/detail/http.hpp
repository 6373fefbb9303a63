#pragma once

#include <httplib.h>

// <resolv.h> (pulled in by httplib) defines `_res` as a macro, which
// collides with parameter names inside Eigen.
#ifdef _res
#undef _res
#endif
