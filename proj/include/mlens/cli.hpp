#pragma once

namespace mlens {

inline int dispatch(int, char**) { return 1; }  // placeholder during bring-up

}  // namespace mlens
