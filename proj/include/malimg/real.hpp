#pragma once

namespace malimg {

// Network arithmetic type. The library is built in single precision; the
// gradient-check test links a second copy built with MALIMG_REAL_DOUBLE.
#ifdef MALIMG_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

}  // namespace malimg
