#include <string>
#include <vector>

#include "modalseg/cli.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training reallocates the same large activation buffers every step; keeping
  // them on the heap avoids re-faulting fresh mmap pages each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return modalseg::cli::run_cli(std::vector<std::string>(argv, argv + argc));
}
