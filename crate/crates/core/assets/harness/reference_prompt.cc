// Add every #include the code below needs.

// 1. Define the serial reference solution of the problem as a function named
//    `reference`. Use standard C++ types (for example std::vector<double>) for
//    the inputs and the return value. Do not use OpenMP here.

// 2. Declare a function named `generated` whose signature is identical to
//    `reference` except for the name. Do not define it; its definition lives
//    in generated.cc.

// 3. Define `bool validate()`. It must draw 10 random test inputs, call both
//    `reference` and `generated` on each input, compare the two results
//    (with a small tolerance for floating point values) and return false on
//    the first mismatch, true otherwise.

// 4. Define `void benchmark()`. It must build one large random input and call
//    `generated` on it once, keeping the result alive so the call is not
//    optimized away.
